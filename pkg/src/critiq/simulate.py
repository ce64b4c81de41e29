"""Multi-step critiquing user simulation and the latency probe.

A simulated user hunts for one held-out target item: the session starts
from the plain recommendation, and at each turn the user critiques a
keyphrase the target does not carry (chosen by one of three styles) until
the target enters the top-N or the turn budget runs out. Sessions never
repeat a critique and never critique a keyphrase on the target.
"""

from __future__ import annotations

import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from critiq.critiquing import BlendGate, bac_blend, combine_multi, embed_all_critiques, uac_blend
from critiq.model import rank_items

STRATEGIES = ("random", "pop", "diff")
BLENDERS = ("gate", "uac", "bac")
DIFF_TOP_ITEMS = 10


@dataclass
class SimulationConfig:
    strategy: str = "random"
    top_n: int = 20
    max_steps: int = 10
    pool_size: int | None = 300  # None -> full catalog
    seed: int = 0
    blender: str = "gate"
    max_sessions: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.blender not in BLENDERS:
            raise ValueError(f"unknown blender {self.blender!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class SessionOutcome:
    user: int
    target: int
    success: bool
    length: int  # critiques used; 0 when the target starts inside top-N
    ranks: list  # target rank after each step, starting at step 0
    critiques: list = field(default_factory=list)


def select_critique(strategy, candidates, rng, pop_weights=None, top_item_kp_counts=None):
    """Pick one keyphrase to critique from the (nonempty, sorted) candidates.

    random: uniform. pop: proportional to global training usage. diff:
    the candidate most frequent among the currently top-recommended items
    (all candidates are absent from the target, so the differential is
    just that frequency); ties go to the lowest index.
    """
    if len(candidates) == 0:
        raise ValueError("no candidate keyphrases")
    if strategy == "random":
        return int(rng.choice(candidates))
    if strategy == "pop":
        weights = pop_weights[candidates].astype(np.float64)
        total = weights.sum()
        if total <= 0:
            return int(rng.choice(candidates))
        return int(rng.choice(candidates, p=weights / total))
    if strategy == "diff":
        counts = top_item_kp_counts[candidates]
        return int(candidates[int(np.argmax(counts))])
    raise ValueError(f"unknown strategy {strategy!r}")


class _SimContext:
    """Precomputed model state shared across sessions."""

    def __init__(self, model, gate, dataset):
        self.model = model
        self.gate = gate
        self.dataset = dataset
        self.base_latents = model.latents_for_users(dataset.r_train)
        self.critique_embeddings = embed_all_critiques(model)
        self.pop_weights = dataset.k_user.column_counts().astype(np.float64)
        self.k_item_dense = dataset.k_item.to_dense(np.float64)

    def blended(self, blender, z0, embeddings):
        if blender == "gate":
            if self.gate is None:
                raise ValueError("gate blender requested but no gate provided")
            return combine_multi(self.gate, z0, embeddings)
        if blender == "uac":
            return uac_blend(z0, embeddings)
        return bac_blend(z0, embeddings)


def _target_rank(scores, pool, target):
    """1-based rank of the target within the pool by descending score,
    ties by ascending item index."""
    order, _ = rank_items(scores[pool])
    ranked = pool[order]
    return int(np.flatnonzero(ranked == target)[0]) + 1


def simulate_session(ctx, user, target, config, rng):
    model, dataset = ctx.model, ctx.dataset
    train_items = dataset.r_train.row(user)

    if config.pool_size is not None:
        seen = set(int(i) for i in np.concatenate([
            train_items, dataset.r_val.row(user), dataset.r_test.row(user)]))
        unseen = np.array([i for i in range(dataset.n_items)
                           if i not in seen and i != target], dtype=np.int64)
        n_extra = min(config.pool_size - 1, len(unseen))
        sampled = rng.choice(unseen, size=n_extra, replace=False) if n_extra else []
        pool = np.sort(np.concatenate([[target], np.asarray(sampled, np.int64)]))
    else:
        pool = np.setdiff1d(np.arange(dataset.n_items), train_items, assume_unique=True)
        if target not in pool:
            pool = np.sort(np.append(pool, target))

    candidates = np.setdiff1d(np.arange(dataset.n_keyphrases),
                              dataset.k_item.row(target), assume_unique=True)
    z0 = ctx.base_latents[user]
    embeddings = []
    critiques = []
    scores = ctx.model.item_scores(z0)[0]
    ranks = [_target_rank(scores, pool, target)]

    for _ in range(config.max_steps):
        if ranks[-1] <= config.top_n:
            return SessionOutcome(user, int(target), True, len(critiques), ranks, critiques)
        if len(candidates) == 0:
            break
        kp_counts = None
        if config.strategy == "diff":
            order, _ = rank_items(scores[pool])
            top_items = pool[order[:DIFF_TOP_ITEMS]]
            kp_counts = ctx.k_item_dense[top_items].sum(axis=0)
        critique = select_critique(config.strategy, candidates, rng,
                                   pop_weights=ctx.pop_weights,
                                   top_item_kp_counts=kp_counts)
        candidates = candidates[candidates != critique]
        critiques.append(critique)
        embeddings.append(ctx.critique_embeddings[critique])
        z = ctx.blended(config.blender, z0, embeddings)
        scores = ctx.model.item_scores(z)[0]
        ranks.append(_target_rank(scores, pool, target))

    success = ranks[-1] <= config.top_n
    return SessionOutcome(user, int(target), success, len(critiques), ranks, critiques)


def _mean_ci(values):
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return float("nan"), (float("nan"), float("nan"))
    mean = float(values.mean())
    if len(values) == 1:
        return mean, (mean, mean)
    half = 1.96 * float(values.std(ddof=1)) / np.sqrt(len(values))
    return mean, (mean - half, mean + half)


def run_simulation(model, gate, dataset, config, trace=None):
    """Simulate sessions over (user, test-positive) pairs; returns a JSON-
    ready report with success rate and session length plus 95% CIs."""
    ctx = model if isinstance(model, _SimContext) else _SimContext(model, gate, dataset)
    pairs = [(u, int(t)) for u in range(dataset.n_users)
             for t in dataset.r_test.row(u)]
    rng = np.random.default_rng(config.seed)
    if config.max_sessions is not None and len(pairs) > config.max_sessions:
        chosen = rng.choice(len(pairs), size=config.max_sessions, replace=False)
        pairs = [pairs[i] for i in sorted(chosen)]

    seeds = np.random.SeedSequence(config.seed).spawn(len(pairs))
    outcomes = []
    for (user, target), seq in zip(pairs, seeds):
        outcome = simulate_session(ctx, user, target, config, np.random.default_rng(seq))
        outcomes.append(outcome)
        if trace is not None:
            for step, rank in enumerate(outcome.ranks):
                crit = outcome.critiques[step - 1] if step > 0 else ""
                trace.append((user, target, step, crit, rank))

    successes = [o for o in outcomes if o.success]
    success_rate = len(successes) / len(outcomes) if outcomes else float("nan")
    n = len(outcomes)
    half = 1.96 * np.sqrt(max(success_rate * (1 - success_rate), 0.0) / n) if n else float("nan")
    # failed sessions count at the step cap, so a method that rescues a
    # session shortens the average instead of being punished for it
    capped = [o.length if o.success else config.max_steps for o in outcomes]
    length_mean, length_ci = _mean_ci(capped)
    success_length_mean, _ = _mean_ci([o.length for o in successes])
    return {
        "config": {
            "strategy": config.strategy, "top_n": config.top_n,
            "max_steps": config.max_steps, "pool_size": config.pool_size,
            "seed": config.seed, "blender": config.blender,
            "max_sessions": config.max_sessions,
        },
        "n_sessions": n,
        "success_rate": success_rate,
        "success_rate_ci95": [success_rate - half, success_rate + half],
        "mean_session_length": length_mean,
        "mean_session_length_ci95": list(length_ci),
        "mean_success_length": success_length_mean,
        "n_successes": len(successes),
    }


def latency_probe(model, gate, n_critiques=1000, warmup=50, seed=0):
    """Wall time of the single-critique path (embed + blend + decode) at
    batch size 1. Returns mean/std/percentile milliseconds."""
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal(model.latent_dim).astype(model.dtype)
    keyphrases = rng.integers(0, model.n_keyphrases, size=warmup + n_critiques)

    def one(kp):
        x = np.zeros((1, model.n_keyphrases), dtype=model.dtype)
        x[0, kp] = 1.0
        params, _ = model._gaussian_from_net(model.enc_k, x)
        z = gate.blend(z0, params.mu[0])
        return model.item_scores(z)

    for kp in keyphrases[:warmup]:
        one(kp)
    times = np.empty(n_critiques, dtype=np.float64)
    for j, kp in enumerate(keyphrases[warmup:]):
        start = time.perf_counter()
        one(kp)
        times[j] = time.perf_counter() - start
    times_ms = times * 1e3
    return {
        "n_critiques": int(n_critiques),
        "mean_ms": float(times_ms.mean()),
        "std_ms": float(times_ms.std(ddof=1)),
        "p50_ms": float(np.percentile(times_ms, 50)),
        "p95_ms": float(np.percentile(times_ms, 95)),
    }


def new_session_id():
    return uuid.uuid4().hex
