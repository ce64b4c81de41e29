import numpy as np
import pytest
from helpers import finite_diff_grads, rel_error

from critiq import data, kernels
from critiq.model import (
    GaussianParams,
    GradBuffer,
    MultimodalVae,
    TrainingConfig,
    TrainingDiverged,
    elbo_joint,
    elbo_single,
    kl_std_normal,
    multinomial_loglik,
    rank_items,
    reparam_sample,
    train,
)


def _small_model(n_items=12, n_keyphrases=6, h=4, seed=0, dtype=np.float64,
                 **cfg_kwargs):
    config = TrainingConfig(latent_dim=h, seed=seed, dropout=0.0, **cfg_kwargs)
    return MultimodalVae(n_items, n_keyphrases, config, dtype=dtype)


def _rows_flat(rows):
    chunks = [np.asarray(r, np.int64) for r in rows]
    indptr = np.zeros(len(chunks) + 1, np.int64)
    for i, c in enumerate(chunks):
        indptr[i + 1] = indptr[i] + len(c)
    indices = np.concatenate(chunks) if indptr[-1] else np.zeros(0, np.int64)
    return indices, indptr


class TestReparamAndKl:
    def test_zero_epsilon_returns_mean(self):
        params = GaussianParams(np.array([[1.0, -2.0]]), np.array([[0.5, 3.0]]))
        np.testing.assert_array_equal(
            reparam_sample(params, np.zeros((1, 2))), params.mu)

    def test_formula(self):
        params = GaussianParams(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0]]))
        z = reparam_sample(params, np.array([[0.5, -0.5]]))
        np.testing.assert_allclose(z, [[1.5, 1.5]])

    def test_kl_standard_normal_is_zero(self):
        params = GaussianParams(np.zeros((1, 8)), np.ones((1, 8)))
        assert abs(kl_std_normal(params)[0]) < 1e-9

    def test_kl_unit_mean_shift(self):
        params = GaussianParams(np.array([[1.0]]), np.array([[1.0]]))
        assert kl_std_normal(params)[0] == pytest.approx(0.5, abs=1e-12)

    def test_kl_nonnegative_random(self):
        rng = np.random.default_rng(0)
        params = GaussianParams(rng.normal(size=(50, 6)),
                                np.exp(rng.normal(size=(50, 6))))
        assert np.all(kl_std_normal(params) >= 0)

    def test_kl_matches_monte_carlo(self):
        # KL = E_q[log q(z) - log p(z)] estimated from q samples
        rng = np.random.default_rng(1)
        mu = np.array([0.3, -1.2, 0.7])
        sigma = np.array([0.6, 1.4, 0.9])
        params = GaussianParams(mu[None, :], sigma[None, :])
        n = 1_000_000
        z = mu + rng.standard_normal((n, 3)) * sigma
        log_q = -0.5 * (((z - mu) / sigma) ** 2 + np.log(2 * np.pi)) - np.log(sigma)
        log_p = -0.5 * (z**2 + np.log(2 * np.pi))
        mc = float(np.mean(np.sum(log_q - log_p, axis=1)))
        closed = kl_std_normal(params)[0]
        assert abs(mc - closed) / closed < 0.01


class TestMultinomial:
    def test_uniform_logits_two_positives(self):
        loglik = multinomial_loglik([1, 3], np.zeros(4))
        assert loglik == pytest.approx(2 * np.log(0.25), abs=1e-9)

    def test_empty_positives_zero(self):
        assert multinomial_loglik([], np.random.default_rng(0).normal(size=7)) == 0.0

    def test_log_softmax_normalizes(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(20, 15)).astype(np.float32) * 5
        lsm = kernels.log_softmax(logits)
        sums = np.exp(lsm.astype(np.float64)).sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-5)


class TestEncode:
    def test_requires_a_modality(self):
        model = _small_model()
        with pytest.raises(ValueError):
            model.encode()

    def test_single_modality_is_expert_exactly(self):
        model = _small_model()
        row = np.array([0, 3, 7])
        posterior = model.encode(r_indices=row)
        assert len(posterior.experts) == 1 and posterior.experts[0][0] == 1.0
        x = model._input_rows([row], model.n_items)
        direct, _ = model._gaussian_from_net(model.enc_r, x)
        np.testing.assert_array_equal(posterior.single().mu, direct.mu)
        np.testing.assert_array_equal(posterior.single().sigma, direct.sigma)

    def test_k_only_uses_keyphrase_expert(self):
        model = _small_model()
        row = np.array([1, 4])
        posterior = model.encode(k_indices=row)
        x = model._input_rows([row], model.n_keyphrases)
        direct, _ = model._gaussian_from_net(model.enc_k, x)
        np.testing.assert_array_equal(posterior.single().mu, direct.mu)

    def test_tied_experts_mixture_degenerates(self):
        # same input dims + shared weights: the two experts coincide, so the
        # mixture mean equals either expert's mean
        model = _small_model(n_items=6, n_keyphrases=6)
        for key in ("W1", "b1", "W2", "b2"):
            getattr(model.enc_k, key)[...] = getattr(model.enc_r, key)
        row = np.array([0, 2])
        both = model.encode(r_indices=row, k_indices=row)
        lone = model.encode(r_indices=row)
        np.testing.assert_array_equal(both.mean(), lone.mean())


class TestElbo:
    def test_joint_uniform_decoders_beta_zero(self):
        model = _small_model(n_items=10, n_keyphrases=5)
        for dec in (model.dec_r, model.dec_k):
            for arr in dec.params().values():
                arr[...] = 0.0
        lam = 2.5
        r_flat = _rows_flat([[0, 1, 2]])
        k_flat = _rows_flat([[1, 4]])
        rng = np.random.default_rng(0)
        losses = elbo_joint(model, r_flat, k_flat, beta=0.0, lam=lam, rng=rng)
        expected = lam * (3 * np.log(10) + 2 * np.log(5))
        assert losses[0] == pytest.approx(expected, rel=1e-9)

    def test_single_uniform_decoder_beta_zero(self):
        model = _small_model(n_items=10, n_keyphrases=5)
        for arr in model.dec_r.params().values():
            arr[...] = 0.0
        losses = elbo_single(model, "r", _rows_flat([[2, 5]]), beta=0.0, lam=1.5,
                             rng=np.random.default_rng(0))
        assert losses[0] == pytest.approx(1.5 * 2 * np.log(10), rel=1e-9)

    def test_tied_experts_joint_equals_single_expert_bound(self):
        # with identical experts fed the same input, the stratified average
        # collapses onto either expert's full two-modality bound
        model = _small_model(n_items=6, n_keyphrases=6, h=3, seed=4)
        for key in ("W1", "b1", "W2", "b2"):
            getattr(model.enc_k, key)[...] = getattr(model.enc_r, key)
        row = [0, 3, 5]
        r_flat = _rows_flat([row])
        k_flat = _rows_flat([row])
        eps = np.random.default_rng(5).standard_normal((1, 3))
        avg = elbo_joint(model, r_flat, k_flat, beta=0.8, lam=1.3, eps=eps)
        expert_r = elbo_joint(model, r_flat, k_flat, beta=0.8, lam=1.3, eps=eps,
                              weights=(1.0, 0.0))
        assert abs(avg[0] - expert_r[0]) < 1e-6

    def test_fixed_expert_matches_expanded_bound(self):
        # alpha pinned to the interaction expert == reconstruction of both
        # modalities under its sample minus beta * its KL, composed by hand
        model = _small_model(n_items=9, n_keyphrases=5, h=4, seed=8)
        r_row, k_row = [1, 4, 6], [0, 2]
        eps = np.random.default_rng(9).standard_normal((1, 4))
        beta, lam = 0.6, 2.0
        loss = elbo_joint(model, _rows_flat([r_row]), _rows_flat([k_row]),
                          beta=beta, lam=lam, eps=eps, weights=(1.0, 0.0))[0]

        x = model._input_rows([r_row], model.n_items)
        params, _ = model._gaussian_from_net(model.enc_r, x)
        z = reparam_sample(params, eps)
        recon = (multinomial_loglik(r_row, model.dec_r.forward(z)[0][0])
                 + multinomial_loglik(k_row, model.dec_k.forward(z)[0][0]))
        expected = -lam * recon + beta * kl_std_normal(params)[0]
        assert abs(loss - expected) < 1e-6

    @pytest.mark.parametrize("seed", [0, 1])
    def test_joint_gradients_match_finite_differences(self, seed):
        model = _small_model(n_items=8, n_keyphrases=5, h=3, seed=seed)
        rng = np.random.default_rng(seed)
        r_rows = [np.sort(rng.choice(8, size=3, replace=False)) for _ in range(4)]
        k_rows = [np.sort(rng.choice(5, size=2, replace=False)) for _ in range(4)]
        r_flat, k_flat = _rows_flat(r_rows), _rows_flat(k_rows)
        eps = rng.standard_normal((4, 3))

        def loss():
            return float(np.sum(elbo_joint(model, r_flat, k_flat,
                                           beta=0.4, lam=1.7, eps=eps)))

        grads = GradBuffer(model)
        elbo_joint(model, r_flat, k_flat, beta=0.4, lam=1.7, eps=eps, grads=grads)
        fd = finite_diff_grads(loss, model.param_dict(), h=1e-4)
        for key in fd:
            assert rel_error(grads.grads[key], fd[key]) < 1e-3, key

    @pytest.mark.parametrize("modality", ["r", "k"])
    def test_single_gradients_match_finite_differences(self, modality):
        model = _small_model(n_items=8, n_keyphrases=5, h=3, seed=3)
        rng = np.random.default_rng(3)
        dim = 8 if modality == "r" else 5
        rows = [np.sort(rng.choice(dim, size=2, replace=False)) for _ in range(3)]
        flat = _rows_flat(rows)
        eps = rng.standard_normal((3, 3))

        def loss():
            return float(np.sum(elbo_single(model, modality, flat,
                                            beta=0.9, lam=1.2, eps=eps)))

        grads = GradBuffer(model)
        elbo_single(model, modality, flat, beta=0.9, lam=1.2, eps=eps, grads=grads)
        fd = finite_diff_grads(loss, model.param_dict(), h=1e-4)
        for key in fd:
            assert rel_error(grads.grads[key], fd[key]) < 1e-3, key


class TestTraining:
    def test_loss_decreases_over_first_epochs(self, trained_model):
        # epoch 0 runs under a smaller (annealing) KL weight, so compare
        # from the first full-weight epoch onward
        history = trained_model.training_history
        window = history[1:7]
        assert all(b < a for a, b in zip(window, window[1:])), window
        assert history[-1] < 0.9 * history[1]

    def test_same_seed_same_trace(self, mini_dataset):
        config = TrainingConfig(latent_dim=8, epochs=3, batch_size=16,
                                learning_rate=1e-3, dropout=0.2, seed=42)
        traces = []
        for _ in range(2):
            model = MultimodalVae(mini_dataset.n_items, mini_dataset.n_keyphrases, config)
            traces.append(train(model, mini_dataset, config))
        assert traces[0] == traces[1]

    def test_masked_modality_gets_no_updates(self, mini_dataset):
        # all users r-only: the keyphrase encoder/decoder must stay untouched
        config = TrainingConfig(latent_dim=8, epochs=2, batch_size=16,
                                learning_rate=1e-3, dropout=0.0, seed=0)
        model = MultimodalVae(mini_dataset.n_items, mini_dataset.n_keyphrases, config)
        mask = data.ModalityMask(
            np.ones(mini_dataset.n_users, bool), np.zeros(mini_dataset.n_users, bool))
        before_k = {k: v.copy() for k, v in model.enc_k.params().items()}
        before_dk = {k: v.copy() for k, v in model.dec_k.params().items()}
        before_r = model.enc_r.W1.copy()
        train(model, mini_dataset, config, mask=mask)
        for key, arr in model.enc_k.params().items():
            np.testing.assert_array_equal(arr, before_k[key])
        for key, arr in model.dec_k.params().items():
            np.testing.assert_array_equal(arr, before_dk[key])
        assert not np.array_equal(model.enc_r.W1, before_r)

    def test_divergence_detected(self, mini_dataset):
        config = TrainingConfig(latent_dim=8, epochs=1, batch_size=16,
                                learning_rate=1e-3, dropout=0.0, seed=0)
        model = MultimodalVae(mini_dataset.n_items, mini_dataset.n_keyphrases, config)
        model.enc_r.W1[...] = np.nan
        with pytest.raises(TrainingDiverged):
            train(model, mini_dataset, config)


class TestRecommendExplain:
    def test_exclude_all_but_one(self, trained_model, toy_dataset):
        row = toy_dataset.r_train.row(0)
        keep = 57
        exclude = [i for i in range(toy_dataset.n_items) if i != keep]
        items, scores = trained_model.recommend(row, exclude=exclude)
        assert items.tolist() == [keep]

    def test_k_only_cold_start(self, trained_model):
        items, scores = trained_model.recommend(k_indices=np.array([0, 4]))
        assert len(items) == trained_model.n_items
        assert np.all(np.diff(scores) <= 0)

    def test_recommend_deterministic(self, trained_model, toy_dataset):
        row = toy_dataset.r_train.row(3)
        a = trained_model.recommend(row)
        b = trained_model.recommend(row)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_tie_break_ascending_index(self):
        items, scores = rank_items(np.zeros(6), exclude=[2])
        assert items.tolist() == [0, 1, 3, 4, 5]

    def test_explain_full_permutation(self, trained_model):
        kps, _ = trained_model.explain(r_indices=np.array([0, 1]), top_k=None)
        assert sorted(kps.tolist()) == list(range(trained_model.n_keyphrases))

    def test_explain_hits_cluster_keyphrases(self, trained_model, toy_dataset):
        # clustered fixture: top-5 explanation should recover the user's
        # cluster keyphrase block
        recalls = []
        for u in range(0, toy_dataset.n_users, 10):
            cluster = u % 4
            cluster_kps = set(np.flatnonzero(
                (np.arange(toy_dataset.n_keyphrases) % 4) == cluster).tolist())
            kps, _ = trained_model.explain(toy_dataset.r_train.row(u), top_k=5)
            recalls.append(len(set(kps.tolist()) & cluster_kps) / len(cluster_kps))
        assert float(np.mean(recalls)) >= 0.6
