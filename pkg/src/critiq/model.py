"""Multimodal VAE over user-item interactions and user-keyphrase usage.

Two diagonal-Gaussian encoders (one per modality) feed a uniform two-expert
mixture posterior; two multinomial decoders reconstruct each modality from
the shared latent. Training optimizes the sum of three bound terms per
minibatch (joint, interactions-only, keyphrases-only) so each encoder also
learns on its own, which keeps single-modality and cold-start inference
usable and lets the keyphrase encoder embed critiques later.

The joint term evaluates the mixture stratified: the full two-modality
reconstruction minus the KL of one expert, computed under each expert and
averaged with the mixture weights. A single shared noise draw per user
couples the two expert samples, so tied experts collapse exactly onto the
single-expert bound.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from critiq import kernels
from critiq.nn import AdamAmsgrad, TwoLayerNet

log = logging.getLogger(__name__)

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 2.0
SIGMA_FLOOR = 1e-6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    latent_dim: int = 64
    hidden_dim: int | None = None  # None -> latent_dim
    learning_rate: float = 5e-5
    recon_weight: float = 1.0  # multiplies both reconstruction terms
    beta_target: float = 0.2  # KL weight after annealing
    anneal_steps: int | None = None  # None -> one epoch of minibatches
    epochs: int = 100
    batch_size: int = 128
    dropout: float = 0.4
    l2_weight: float = 0.0
    seed: int = 0
    moe_sample_expert: bool = False  # sample one expert per user instead of averaging

    def __post_init__(self):
        if self.recon_weight <= 0:
            raise ValueError("recon_weight must be > 0")
        if self.beta_target < 0:
            raise ValueError("beta_target must be >= 0")
        if self.anneal_steps is not None and self.anneal_steps < 1:
            raise ValueError("anneal_steps must be >= 1")

    @property
    def hidden(self):
        return self.hidden_dim if self.hidden_dim is not None else self.latent_dim

    @classmethod
    def preset(cls, name):
        """Per-dataset-family defaults; 'toy' targets the test fixture scale."""
        presets = {
            "beer": cls(latent_dim=300, learning_rate=5e-5, l2_weight=1e-10,
                        recon_weight=3.0, beta_target=0.7, epochs=300, dropout=0.4),
            "cds": cls(latent_dim=400, learning_rate=5e-5, l2_weight=1e-12,
                       recon_weight=1.0, beta_target=0.4, epochs=400, dropout=0.4),
            "yelp": cls(latent_dim=500, learning_rate=5e-5, l2_weight=1e-10,
                        recon_weight=10.0, beta_target=0.8, epochs=300, dropout=0.7),
            "hotel": cls(latent_dim=400, learning_rate=5e-5, l2_weight=1e-12,
                         recon_weight=2.0, beta_target=0.8, epochs=300, dropout=0.0),
            "toy": cls(latent_dim=64, learning_rate=1e-3, recon_weight=1.0,
                       beta_target=0.2, epochs=150, batch_size=64, dropout=0.1),
        }
        try:
            return replace(presets[name])
        except KeyError:
            raise ValueError(f"unknown preset {name!r}") from None

    def to_dict(self):
        return {
            "latent_dim": self.latent_dim, "hidden_dim": self.hidden_dim,
            "learning_rate": self.learning_rate, "recon_weight": self.recon_weight,
            "beta_target": self.beta_target, "anneal_steps": self.anneal_steps,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "dropout": self.dropout, "l2_weight": self.l2_weight,
            "seed": self.seed, "moe_sample_expert": self.moe_sample_expert,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GaussianParams:
    """Diagonal Gaussian posterior parameters, one row per user."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu/sigma shape mismatch")


@dataclass
class MixturePosterior:
    """Weighted list of Gaussian experts; single-modality input degenerates
    to exactly one expert with weight 1."""

    experts: list  # [(weight, GaussianParams)]

    def mean(self):
        return sum(w * p.mu for w, p in self.experts)

    def single(self):
        if len(self.experts) != 1:
            raise ValueError("posterior has more than one expert")
        return self.experts[0][1]


def kl_std_normal(params):
    """KL(N(mu, diag sigma^2) || N(0, I)) per row, accumulated in float64."""
    mu = params.mu.astype(np.float64)
    sigma = params.sigma.astype(np.float64)
    return 0.5 * np.sum(sigma**2 + mu**2 - 1.0 - 2.0 * np.log(sigma), axis=-1)


def reparam_sample(params, epsilon):
    """z = mu + epsilon * sigma with an injected standard-normal draw."""
    return params.mu + epsilon * params.sigma


def multinomial_loglik(positives, logits):
    """Sum of log-softmax(logits) over the positive indices (0 if none)."""
    logits = np.atleast_2d(logits)
    indices = np.asarray(positives, dtype=np.int64)
    indptr = np.array([0, len(indices)], dtype=np.int64)
    losses, _ = kernels.multinomial_nll_grad(np.ascontiguousarray(logits), indices, indptr)
    return -losses[0]


class MultimodalVae:
    """Encoder/decoder pairs plus the mixture posterior and ranking heads."""

    def __init__(self, n_items, n_keyphrases, config, dtype=np.float32):
        self.n_items = n_items
        self.n_keyphrases = n_keyphrases
        self.config = config
        self.dtype = np.dtype(dtype)
        h, hid = config.latent_dim, config.hidden
        rng = np.random.default_rng(config.seed)
        self.enc_r = TwoLayerNet(n_items, hid, 2 * h, rng, self.dtype)
        self.enc_k = TwoLayerNet(n_keyphrases, hid, 2 * h, rng, self.dtype)
        self.dec_r = TwoLayerNet(h, hid, n_items, rng, self.dtype)
        self.dec_k = TwoLayerNet(h, hid, n_keyphrases, rng, self.dtype)

    @property
    def latent_dim(self):
        return self.config.latent_dim

    def nets(self):
        return {"enc_r": self.enc_r, "enc_k": self.enc_k,
                "dec_r": self.dec_r, "dec_k": self.dec_k}

    def param_dict(self):
        out = {}
        for net_name, net in self.nets().items():
            for key, arr in net.params().items():
                out[f"{net_name}.{key}"] = arr
        return out

    def params_digest(self):
        digest = hashlib.sha256()
        for key in sorted(self.param_dict()):
            digest.update(key.encode())
            digest.update(np.ascontiguousarray(self.param_dict()[key]).tobytes())
        return digest.hexdigest()

    # --- encoding ---

    def _gaussian_from_net(self, net, x, dropout=0.0, training=False, rng=None):
        out, cache = net.forward(x, dropout, training, rng)
        h = self.latent_dim
        mu = out[:, :h]
        log_sigma = np.clip(out[:, h:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        sigma = np.maximum(np.exp(log_sigma), self.dtype.type(SIGMA_FLOOR))
        return GaussianParams(mu, sigma), (cache, out[:, h:])

    def _input_rows(self, indices_list, n_cols):
        chunks = [np.asarray(ix, dtype=np.int64) for ix in indices_list]
        indptr = np.zeros(len(chunks) + 1, dtype=np.int64)
        for i, c in enumerate(chunks):
            indptr[i + 1] = indptr[i] + len(c)
        flat = np.concatenate(chunks) if indptr[-1] else np.zeros(0, np.int64)
        return kernels.scatter_normalized_rows(flat, indptr, n_cols, self.dtype)

    def encode(self, r_indices=None, k_indices=None):
        """Posterior for one user from whichever modalities are present.

        Inputs are sparse index rows; they are expanded and L2-normalized
        before the encoders. With both modalities the result is the uniform
        two-expert mixture; with one it is exactly that expert.
        """
        if r_indices is None and k_indices is None:
            raise ValueError("at least one modality must be provided")
        experts = []
        if r_indices is not None:
            x = self._input_rows([r_indices], self.n_items)
            experts.append(self._gaussian_from_net(self.enc_r, x)[0])
        if k_indices is not None:
            x = self._input_rows([k_indices], self.n_keyphrases)
            experts.append(self._gaussian_from_net(self.enc_k, x)[0])
        if len(experts) == 1:
            return MixturePosterior([(1.0, experts[0])])
        return MixturePosterior([(0.5, experts[0]), (0.5, experts[1])])

    def user_latent(self, r_indices=None, k_indices=None):
        """Posterior mean as a 1-D latent vector (deterministic inference)."""
        return self.encode(r_indices, k_indices).mean()[0]

    def latents_for_users(self, matrix, user_ids=None):
        """Batch posterior means from interaction rows (encoder r only)."""
        users = range(matrix.n_rows) if user_ids is None else user_ids
        indices, indptr = matrix.subset_flat(list(users))
        x = kernels.scatter_normalized_rows(indices, indptr, self.n_items, self.dtype)
        params, _ = self._gaussian_from_net(self.enc_r, x)
        return params.mu

    # --- decoding / ranking ---

    def item_scores(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=self.dtype))
        return self.dec_r.forward(z)[0]

    def keyphrase_scores(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=self.dtype))
        return self.dec_k.forward(z)[0]

    def recommend(self, r_indices=None, k_indices=None, exclude=(), top_n=None):
        """Ranked (item, score) arrays, descending score, ties by item index.

        Inference uses the posterior mean (no sampling); excluded items are
        removed from the ranking.
        """
        z = self.user_latent(r_indices, k_indices)
        return rank_items(self.item_scores(z)[0], exclude=exclude, top_n=top_n)

    def explain(self, r_indices=None, k_indices=None, top_k=None):
        """Ranked keyphrase indices with scores (no exclusion)."""
        z = self.user_latent(r_indices, k_indices)
        return rank_items(self.keyphrase_scores(z)[0], top_n=top_k)


def rank_items(scores, exclude=(), top_n=None):
    """Descending-score order with ties broken by ascending index."""
    scores = np.asarray(scores)
    masked = scores.astype(np.float64, copy=True)
    exclude = np.asarray(list(exclude), dtype=np.int64)
    if exclude.size:
        masked[exclude] = -np.inf
    order = np.argsort(-masked, kind="stable")
    if exclude.size:
        order = order[: len(masked) - exclude.size]
    if top_n is not None:
        order = order[:top_n]
    return order, scores[order]


# --- training ---


class GradBuffer:
    """Accumulates parameter gradients keyed like the model's param_dict."""

    def __init__(self, model):
        self.grads = {k: np.zeros_like(v) for k, v in model.param_dict().items()}

    def add_net(self, net_name, net_grads, scale=1.0):
        for key, g in net_grads.items():
            self.grads[f"{net_name}.{key}"] += scale * g if scale != 1.0 else g


def _clip_mask(log_sigma_raw):
    return (log_sigma_raw > LOG_SIGMA_MIN) & (log_sigma_raw < LOG_SIGMA_MAX)


def _backprop_gaussian(model, net_name, enc_state, dmu, dsigma, params, grads):
    cache, log_sigma_raw = enc_state
    dlog_sigma = dsigma * params.sigma
    dlog_sigma = np.where(_clip_mask(log_sigma_raw), dlog_sigma, 0).astype(dmu.dtype)
    upstream = np.concatenate([dmu, dlog_sigma], axis=1)
    net = model.nets()[net_name]
    net_grads, _ = net.backward(cache, upstream)
    grads.add_net(net_name, net_grads)


def elbo_single(model, modality, rows_flat, beta, lam, training=False, rng=None,
                grads=None, eps=None, scale=1.0):
    """Per-user loss of the single-modality bound term (to be minimized):
    lam * multinomial NLL of the same modality + beta * KL of its expert.

    Optionally accumulates parameter gradients of scale * sum(loss).
    """
    enc_name, dec_name, n_cols = {
        "r": ("enc_r", "dec_r", model.n_items),
        "k": ("enc_k", "dec_k", model.n_keyphrases),
    }[modality]
    indices, indptr = rows_flat
    x = kernels.scatter_normalized_rows(indices, indptr, n_cols, model.dtype)
    dropout = model.config.dropout if training else 0.0
    params, enc_state = model._gaussian_from_net(
        model.nets()[enc_name], x, dropout, training, rng)
    if eps is None:
        eps = rng.standard_normal(params.mu.shape).astype(model.dtype)
    z = reparam_sample(params, eps)
    dec = model.nets()[dec_name]
    logits, dec_cache = dec.forward(z)
    nll, dlogits = kernels.multinomial_nll_grad(logits, indices, indptr)
    kl = kl_std_normal(params)
    losses = lam * nll + beta * kl

    if grads is not None:
        s = float(scale)
        dec_grads, dz = dec.backward(dec_cache, (lam * s) * dlogits)
        grads.add_net(dec_name, dec_grads)
        dmu = dz + (beta * s) * params.mu
        dsigma = dz * eps + (beta * s) * (params.sigma - 1.0 / params.sigma)
        _backprop_gaussian(model, enc_name, enc_state,
                           dmu.astype(model.dtype), dsigma.astype(model.dtype),
                           params, grads)
    return losses


def elbo_joint(model, r_flat, k_flat, beta, lam, training=False, rng=None,
               grads=None, eps=None, weights=(0.5, 0.5), scale=1.0):
    """Per-user loss of the joint bound term under the stratified mixture.

    Each expert contributes the reconstruction NLL of BOTH modalities plus
    beta * its own KL; expert losses are averaged with the mixture weights.
    One shared eps per user couples the two expert samples.
    """
    r_indices, r_indptr = r_flat
    k_indices, k_indptr = k_flat
    dropout = model.config.dropout if training else 0.0
    x_r = kernels.scatter_normalized_rows(r_indices, r_indptr, model.n_items, model.dtype)
    x_k = kernels.scatter_normalized_rows(k_indices, k_indptr, model.n_keyphrases, model.dtype)
    params_r, state_r = model._gaussian_from_net(model.enc_r, x_r, dropout, training, rng)
    params_k, state_k = model._gaussian_from_net(model.enc_k, x_k, dropout, training, rng)
    if eps is None:
        eps = rng.standard_normal(params_r.mu.shape).astype(model.dtype)

    total = np.zeros(x_r.shape[0], dtype=np.float64)
    expert_specs = [("enc_r", params_r, state_r), ("enc_k", params_k, state_k)]
    for weight, (enc_name, params, state) in zip(weights, expert_specs):
        if weight == 0.0:
            continue
        z = reparam_sample(params, eps)
        logits_r, cache_r = model.dec_r.forward(z)
        logits_k, cache_k = model.dec_k.forward(z)
        nll_r, dlogits_r = kernels.multinomial_nll_grad(logits_r, r_indices, r_indptr)
        nll_k, dlogits_k = kernels.multinomial_nll_grad(logits_k, k_indices, k_indptr)
        kl = kl_std_normal(params)
        total += weight * (lam * (nll_r + nll_k) + beta * kl)

        if grads is not None:
            s = float(scale) * weight
            dec_r_grads, dz_r = model.dec_r.backward(cache_r, (lam * s) * dlogits_r)
            dec_k_grads, dz_k = model.dec_k.backward(cache_k, (lam * s) * dlogits_k)
            grads.add_net("dec_r", dec_r_grads)
            grads.add_net("dec_k", dec_k_grads)
            dz = dz_r + dz_k
            dmu = dz + (beta * s) * params.mu
            dsigma = dz * eps + (beta * s) * (params.sigma - 1.0 / params.sigma)
            _backprop_gaussian(model, enc_name, state,
                               dmu.astype(model.dtype), dsigma.astype(model.dtype),
                               params, grads)
    return total


def train(model, dataset, config=None, mask=None, progress=None):
    """Train in place; returns the per-epoch mean training loss trace.

    Per minibatch the gradient accumulates the joint term for users with
    both modalities observed, the interactions-only term for every user
    with observed interactions, and the keyphrases-only term for every
    user with observed keyphrase usage, then takes one optimizer step.
    The KL weight anneals linearly from 0 to beta_target.
    """
    from critiq.data import ModalityMask

    config = config or model.config
    n_users = dataset.n_users
    if mask is None:
        mask = ModalityMask.fully_observed(n_users)
    rng = np.random.default_rng(config.seed)
    optimizer = AdamAmsgrad(config.learning_rate)
    params = model.param_dict()

    r_rows = dataset.r_train
    k_rows = dataset.k_user
    r_nonempty = np.array([len(r_rows.row(u)) > 0 for u in range(n_users)])
    k_nonempty = np.array([len(k_rows.row(u)) > 0 for u in range(n_users)])
    r_active = mask.r_observed & r_nonempty
    k_active = mask.k_observed & k_nonempty
    joint_active = r_active & k_active

    batches_per_epoch = max(1, (n_users + config.batch_size - 1) // config.batch_size)
    anneal_steps = config.anneal_steps or batches_per_epoch
    lam = config.recon_weight
    step = 0
    history = []

    for epoch in range(config.epochs):
        order = rng.permutation(n_users)
        epoch_loss = 0.0
        for start in range(0, n_users, config.batch_size):
            batch = order[start:start + config.batch_size]
            beta = config.beta_target * min(1.0, step / anneal_steps)
            grads = GradBuffer(model)
            scale = 1.0 / len(batch)
            batch_loss = 0.0

            joint_users = batch[joint_active[batch]]
            if len(joint_users):
                weights = (0.5, 0.5)
                if config.moe_sample_expert:
                    weights = (1.0, 0.0) if rng.random() < 0.5 else (0.0, 1.0)
                losses = elbo_joint(
                    model, r_rows.subset_flat(joint_users), k_rows.subset_flat(joint_users),
                    beta, lam, training=True, rng=rng, grads=grads,
                    weights=weights, scale=scale)
                batch_loss += losses.sum()
            for modality, active, rows in (("r", r_active, r_rows), ("k", k_active, k_rows)):
                users = batch[active[batch]]
                if len(users):
                    losses = elbo_single(
                        model, modality, rows.subset_flat(users),
                        beta, lam, training=True, rng=rng, grads=grads, scale=scale)
                    batch_loss += losses.sum()

            if config.l2_weight:
                for key, p in params.items():
                    batch_loss += 0.5 * config.l2_weight * float(
                        np.sum(p.astype(np.float64) ** 2))
                    grads.grads[key] += (config.l2_weight * p).astype(p.dtype)

            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}: {batch_loss}")
            optimizer.step(params, grads.grads)
            step += 1
            epoch_loss += batch_loss
        history.append(epoch_loss / n_users)
        if progress:
            progress(epoch, history[-1])
    return history
