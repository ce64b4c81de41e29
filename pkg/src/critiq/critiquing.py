"""Critique embedding, the gated blending module, synthetic-example
construction, max-margin blender training, and multi-step application.

The blender is learned on top of a trained model whose weights stay
frozen: gradients flow from the ranking loss through the item decoder
into the gate parameters only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from critiq import kernels
from critiq.nn import AdamAmsgrad, GradientError, xavier_init

log = logging.getLogger(__name__)

GATE_WEIGHT_KEYS = ("W_ir", "W_iu", "W_in", "W_hr", "W_hz", "W_hn")
GATE_BIAS_KEYS = ("b_ir", "b_iu", "b_in", "b_hr", "b_hz", "b_hn")

# margin presets tuned per dataset family
MARGIN_PRESETS = {"beer": 0.75, "cds": 3.0, "yelp": 2.0, "hotel": 5.0, "toy": 2.0}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class BlendGate:
    """Two-step gated recurrence over (base latent, critique embedding).

    Both steps share the same parameters; the hidden state starts at zero,
    consumes the base latent, then the critique embedding, and the second
    hidden state is the blended latent. Gates follow
    r = sigmoid(x W_ir + h W_hr), u = sigmoid(x W_iu + h W_hz),
    n = tanh(x W_in + (r * h) W_hn), h' = (1 - u) * n + u * h,
    each with its own bias vector.
    """

    def __init__(self, latent_dim, rng=None, dtype=np.float32):
        self.latent_dim = latent_dim
        self.dtype = np.dtype(dtype)
        rng = rng or np.random.default_rng(0)
        self.params = {}
        for key in GATE_WEIGHT_KEYS:
            self.params[key] = xavier_init((latent_dim, latent_dim), rng, self.dtype)
        for key in GATE_BIAS_KEYS:
            self.params[key] = np.zeros(latent_dim, dtype=self.dtype)

    def param_dict(self):
        return self.params

    def _step(self, x, h):
        p = self.params
        r = _sigmoid(x @ p["W_ir"] + p["b_ir"] + h @ p["W_hr"] + p["b_hr"])
        u = _sigmoid(x @ p["W_iu"] + p["b_iu"] + h @ p["W_hz"] + p["b_hz"])
        n = np.tanh(x @ p["W_in"] + p["b_in"] + (r * h) @ p["W_hn"] + p["b_hn"])
        h_next = (1.0 - u) * n + u * h
        return h_next, (x, h, r, u, n)

    def forward(self, z0, zc):
        """Blend a batch of base latents with critique embeddings.

        Returns (blended latents, cache for backward).
        """
        z0 = np.atleast_2d(np.asarray(z0, dtype=self.dtype))
        zc = np.atleast_2d(np.asarray(zc, dtype=self.dtype))
        h0 = np.zeros_like(z0)
        h1, cache1 = self._step(z0, h0)
        h2, cache2 = self._step(zc, h1)
        return h2, (cache1, cache2)

    def blend(self, z0, zc):
        """Pure blended latent for 1-D inputs."""
        return self.forward(z0, zc)[0][0]

    def _step_backward(self, cache, dh_next, grads):
        x, h, r, u, n = cache
        p = self.params
        du = dh_next * (h - n)
        dn = dh_next * (1.0 - u)
        dh = dh_next * u

        da_n = dn * (1.0 - n * n)
        grads["W_in"] += x.T @ da_n
        grads["b_in"] += da_n.sum(axis=0)
        grads["W_hn"] += (r * h).T @ da_n
        grads["b_hn"] += da_n.sum(axis=0)
        drh = da_n @ p["W_hn"].T
        dr = drh * h
        dh += drh * r

        da_u = du * u * (1.0 - u)
        grads["W_iu"] += x.T @ da_u
        grads["b_iu"] += da_u.sum(axis=0)
        grads["W_hz"] += h.T @ da_u
        grads["b_hz"] += da_u.sum(axis=0)
        dh += da_u @ p["W_hz"].T

        da_r = dr * r * (1.0 - r)
        grads["W_ir"] += x.T @ da_r
        grads["b_ir"] += da_r.sum(axis=0)
        grads["W_hr"] += h.T @ da_r
        grads["b_hr"] += da_r.sum(axis=0)
        dh += da_r @ p["W_hr"].T

        dx = da_n @ p["W_in"].T + da_u @ p["W_iu"].T + da_r @ p["W_ir"].T
        return dx, dh

    def backward(self, cache, upstream):
        """Gradients of the blended latent wrt parameters and both inputs."""
        cache1, cache2 = cache
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dzc, dh1 = self._step_backward(cache2, upstream, grads)
        dz0, _ = self._step_backward(cache1, dh1, grads)
        return grads, dz0, dzc


def embed_critique(model, keyphrase):
    """Latent embedding of one critiqued keyphrase: the keyphrase-encoder
    posterior mean of its indicator row (already unit norm)."""
    if not 0 <= keyphrase < model.n_keyphrases:
        raise IndexError(f"keyphrase index {keyphrase} out of range")
    return model.encode(k_indices=np.array([keyphrase])).single().mu[0]


def embed_all_critiques(model):
    """(n_keyphrases, latent) matrix of critique embeddings in index order."""
    x = np.eye(model.n_keyphrases, dtype=model.dtype)
    params, _ = model._gaussian_from_net(model.enc_k, x)
    return params.mu


def combine_multi(gate, z0, critique_embeddings, mode="average"):
    """Fold a critique list into the base latent.

    "average": uniform mean of the embeddings, then one gated blend — the
    order- and duplicate-insensitive default. "sequential": re-blend after
    each critique in order. Empty critique list returns z0 unchanged.
    """
    if len(critique_embeddings) == 0:
        return np.asarray(z0)
    if mode == "average":
        avg = np.mean(np.stack(critique_embeddings), axis=0)
        return gate.blend(z0, avg)
    if mode == "sequential":
        current = np.asarray(z0)
        for zc in critique_embeddings:
            current = gate.blend(current, zc)
        return current
    raise ValueError(f"unknown combination mode {mode!r}")


def uac_blend(z0, critique_embeddings):
    """Uniform average of the base latent and every critique embedding."""
    if len(critique_embeddings) == 0:
        return np.asarray(z0)
    return np.mean(np.stack([np.asarray(z0), *critique_embeddings]), axis=0)


def bac_blend(z0, critique_embeddings):
    """Average the critique embeddings first, then average with the base."""
    if len(critique_embeddings) == 0:
        return np.asarray(z0)
    return 0.5 * (np.asarray(z0) + np.mean(np.stack(critique_embeddings), axis=0))


@dataclass
class SyntheticExample:
    """One self-supervision tuple: critique c is inconsistent with the
    target item; affected/unaffected partition the (possibly restricted)
    item universe by whether they carry c."""

    user: int
    target_item: int
    critique: int
    affected: np.ndarray
    unaffected: np.ndarray


def build_synthetic_dataset(r_val, k_item, rng, restrict_top=None, scores=None):
    """Per validation positive, sample a critique the target does not carry
    and record which items it affects.

    With restrict_top=N (and a score matrix), both item sets are
    intersected with that user's top-N items by initial score. Targets
    carrying every keyphrase are skipped and counted.

    Returns (examples, skipped_count).
    """
    n_items, n_keyphrases = k_item.n_rows, k_item.n_cols
    if r_val.n_cols != n_items:
        raise ValueError("validation matrix and item-keyphrase matrix disagree on items")
    all_kp = np.arange(n_keyphrases)
    all_items = np.arange(n_items)
    affected_by_kp = [np.zeros(0, np.int64)] * n_keyphrases
    cols = [[] for _ in range(n_keyphrases)]
    for i in range(n_items):
        for c in k_item.row(i):
            cols[c].append(i)
    for c in range(n_keyphrases):
        affected_by_kp[c] = np.asarray(cols[c], dtype=np.int64)
    unaffected_by_kp = [np.setdiff1d(all_items, a, assume_unique=True)
                        for a in affected_by_kp]

    top_items = None
    if restrict_top is not None:
        if scores is None:
            raise ValueError("restrict_top requires a score matrix")
        top_items = np.argsort(-scores, axis=1, kind="stable")[:, :restrict_top]

    examples = []
    skipped = 0
    for u in range(r_val.n_rows):
        for i in r_val.row(u):
            candidates = np.setdiff1d(all_kp, k_item.row(i), assume_unique=True)
            if len(candidates) == 0:
                skipped += 1
                continue
            c = int(rng.choice(candidates))
            affected, unaffected = affected_by_kp[c], unaffected_by_kp[c]
            if top_items is not None:
                universe = top_items[u]
                affected = np.intersect1d(affected, universe, assume_unique=False)
                unaffected = np.intersect1d(unaffected, universe, assume_unique=False)
            examples.append(SyntheticExample(int(u), int(i), c, affected, unaffected))
    return examples, skipped


def max_margin_loss(scores_before, scores_after, affected, unaffected, margin):
    """Two-sided hinge: affected items should drop by the margin, the rest
    should rise. Returns (loss, gradient wrt scores_after)."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    s0 = np.atleast_2d(np.ascontiguousarray(scores_before))
    s1 = np.atleast_2d(np.ascontiguousarray(scores_after))
    plus = np.asarray(affected, dtype=np.int64)
    minus = np.asarray(unaffected, dtype=np.int64)
    ptr_p = np.array([0, len(plus)], dtype=np.int64)
    ptr_m = np.array([0, len(minus)], dtype=np.int64)
    losses, grad = kernels.hinge_loss_grad(s0, s1, plus, ptr_p, minus, ptr_m, float(margin))
    return float(losses[0]), grad[0]


@dataclass
class BlenderConfig:
    margin: float = 1.0
    learning_rate: float = 1e-3
    l2_weight: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    restrict_top: int | None = 100


def train_blender(model, dataset, config=None, examples=None, progress=None):
    """Fit the blend gate on synthetic critiques; the model stays frozen.

    Per example: base latent from the user's training interactions,
    critique embedding from the keyphrase encoder, scores before/after
    through the (frozen) item decoder, two-sided hinge on the example's
    item sets. Returns (gate, per-epoch mean loss trace).
    """
    config = config or BlenderConfig()
    rng = np.random.default_rng(config.seed)
    base_latents = model.latents_for_users(dataset.r_train)
    base_scores = model.item_scores(base_latents)
    if examples is None:
        examples, skipped = build_synthetic_dataset(
            dataset.r_val, dataset.k_item, rng,
            restrict_top=config.restrict_top, scores=base_scores)
        if skipped:
            log.info("synthetic dataset skipped %d saturated targets", skipped)
    if not examples:
        raise ValueError("no synthetic examples to train on")

    critique_embeddings = embed_all_critiques(model)
    gate = BlendGate(model.latent_dim, rng=np.random.default_rng(config.seed + 1),
                     dtype=model.dtype)
    optimizer = AdamAmsgrad(config.learning_rate)
    history = []
    n = len(examples)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = [examples[j] for j in order[start:start + config.batch_size]]
            loss = _blender_batch_step(model, gate, optimizer, batch,
                                       base_latents, base_scores,
                                       critique_embeddings, config)
            epoch_loss += loss
        history.append(epoch_loss / n)
        if progress:
            progress(epoch, history[-1])
    return gate, history


def _blender_batch_step(model, gate, optimizer, batch, base_latents,
                        base_scores, critique_embeddings, config):
    users = np.array([ex.user for ex in batch])
    crits = np.array([ex.critique for ex in batch])
    z0 = base_latents[users]
    zc = critique_embeddings[crits]
    blended, gate_cache = gate.forward(z0, zc)
    logits, dec_cache = model.dec_r.forward(blended)

    plus = np.concatenate([ex.affected for ex in batch]) if batch else np.zeros(0, np.int64)
    minus = np.concatenate([ex.unaffected for ex in batch]) if batch else np.zeros(0, np.int64)
    ptr_p = np.zeros(len(batch) + 1, np.int64)
    ptr_m = np.zeros(len(batch) + 1, np.int64)
    for j, ex in enumerate(batch):
        ptr_p[j + 1] = ptr_p[j] + len(ex.affected)
        ptr_m[j + 1] = ptr_m[j] + len(ex.unaffected)
    losses, dlogits = kernels.hinge_loss_grad(
        np.ascontiguousarray(base_scores[users]), logits,
        plus.astype(np.int64), ptr_p, minus.astype(np.int64), ptr_m,
        float(config.margin))

    scale = model.dtype.type(1.0 / len(batch))
    _, dblended = model.dec_r.backward(dec_cache, dlogits * scale)
    gate_grads, _, _ = gate.backward(gate_cache, dblended)
    if config.l2_weight:
        for key, p in gate.params.items():
            gate_grads[key] += (config.l2_weight * p).astype(p.dtype)
    try:
        optimizer.step(gate.params, gate_grads)
    except GradientError:
        raise GradientError("blender training diverged (non-finite gradient)") from None
    return float(losses.sum())


@dataclass
class CritiqueSession:
    """One conversational re-ranking session over a frozen model + gate."""

    session_id: str
    z0: np.ndarray
    exclude: np.ndarray
    top_n: int
    user: int | None = None
    critiques: list = field(default_factory=list)
    embeddings: list = field(default_factory=list)
    z_current: np.ndarray | None = None
    history: list = field(default_factory=list)  # one ranking per step
    closed: bool = False

    @property
    def step(self):
        return len(self.critiques)


class SessionClosed(RuntimeError):
    pass


def open_session(model, session_id, r_indices=None, k_indices=None,
                 exclude=(), top_n=20, user=None):
    z0 = model.user_latent(r_indices, k_indices)
    exclude = np.asarray(sorted(set(int(i) for i in exclude)), dtype=np.int64)
    session = CritiqueSession(session_id=session_id, z0=z0, exclude=exclude,
                              top_n=top_n, user=user, z_current=z0)
    items, scores = rank_session(model, session)
    session.history.append((items, scores))
    return session


def rank_session(model, session):
    from critiq.model import rank_items

    scores = model.item_scores(session.z_current)[0]
    return rank_items(scores, exclude=session.exclude, top_n=None)


def apply_critique(session, model, gate, keyphrase, mode="average"):
    """Append a critique, recombine all of them into a fresh latent, and
    record the new ranking. Returns (ranked items, scores)."""
    if session.closed:
        raise SessionClosed(f"session {session.session_id} is closed")
    if not 0 <= keyphrase < model.n_keyphrases:
        raise IndexError(f"keyphrase index {keyphrase} out of range")
    session.critiques.append(int(keyphrase))
    session.embeddings.append(embed_critique(model, int(keyphrase)))
    if callable(gate) and not isinstance(gate, BlendGate):
        session.z_current = gate(session.z0, session.embeddings)
    else:
        session.z_current = combine_multi(gate, session.z0, session.embeddings, mode)
    ranking = rank_session(model, session)
    session.history.append(ranking)
    return ranking
