"""Mixture model, collapsed Gibbs sampler, R-hat, and cluster evaluation."""

import csv
import json
import math

import numpy as np
import pytest

from latentscope.artifacts import Encodings
from latentscope.direct_eval import average_precision
from latentscope.errors import ConfigError, DataError
from latentscope.mixture import (
    ChainConfig,
    MixtureModel,
    MixturePosterior,
    evaluate_mixture,
    load_posterior_csv,
    mixture_log_likelihood,
    posterior_cluster_prob,
    rhat,
    sample_posterior,
    save_posterior_csv,
    split_rhat,
    write_diagnostics,
)


def constant_posterior(mu=(-1.0, 1.0), sigma=(0.05, 0.05), theta=(0.5, 0.5),
                       chains=2, n=50):
    shape = (chains, n, 2)
    return MixturePosterior(mu=np.broadcast_to(np.asarray(mu), shape).copy(),
                            sigma=np.broadcast_to(np.asarray(sigma), shape).copy(),
                            theta=np.broadcast_to(np.asarray(theta), shape).copy(),
                            rhats={}, flagged=False)


def make_encodings(z):
    z = np.asarray(z, dtype=np.float32)
    n, d = z.shape
    return Encodings(indices=np.arange(n, dtype=np.int64),
                     means=z, log_variances=np.zeros((n, d), np.float32),
                     samples=z)


class TestMixtureModel:
    def test_canonicalizes_descending_means(self):
        m = MixtureModel(means=(2.0, -1.0), stds=(0.3, 0.7), weights=(0.9, 0.1))
        assert m.means == (-1.0, 2.0)
        assert m.stds == (0.7, 0.3)
        assert m.weights == (0.1, 0.9)

    def test_nonpositive_std_rejected(self):
        with pytest.raises(ConfigError, match="positive"):
            MixtureModel(means=(0.0, 1.0), stds=(0.0, 1.0), weights=(0.5, 0.5))

    def test_non_simplex_weights_rejected(self):
        with pytest.raises(ConfigError, match="simplex"):
            MixtureModel(means=(0.0, 1.0), stds=(1.0, 1.0), weights=(0.7, 0.7))


class TestLogLikelihood:
    def test_single_point_closed_form(self):
        model = MixtureModel(means=(0.0, 5.0), stds=(1.0, 1.0),
                             weights=(1.0, 0.0))
        ll = mixture_log_likelihood(model, np.array([0.0]))
        assert abs(ll - (-0.91894)) < 1e-5

    def test_duplicating_data_doubles(self):
        model = MixtureModel(means=(-1.0, 1.0), stds=(0.5, 0.5),
                             weights=(0.4, 0.6))
        rng = np.random.default_rng(0)
        z = rng.normal(size=(10, 3))
        once = mixture_log_likelihood(model, z)
        twice = mixture_log_likelihood(model, np.concatenate([z, z]))
        np.testing.assert_allclose(twice, 2 * once, rtol=1e-12)

    def test_reported_cluster_parameters_order_likelihoods(self):
        # a point at the high cluster's mean is far likelier under it
        means = (-0.13, 0.093)
        stds = (math.sqrt(0.0068), math.sqrt(0.0039))
        z = np.array([0.093])
        only2 = MixtureModel(means=means, stds=stds, weights=(0.0, 1.0))
        only1 = MixtureModel(means=means, stds=stds, weights=(1.0, 0.0))
        assert mixture_log_likelihood(only2, z) > mixture_log_likelihood(only1, z)

    def test_permutation_invariance_via_canonicalization(self):
        a = MixtureModel(means=(-1.0, 2.0), stds=(0.3, 0.6), weights=(0.25, 0.75))
        b = MixtureModel(means=(2.0, -1.0), stds=(0.6, 0.3), weights=(0.75, 0.25))
        z = np.random.default_rng(1).normal(size=(20, 2))
        assert mixture_log_likelihood(a, z) == mixture_log_likelihood(b, z)


class TestSampler:
    def test_recovery_two_well_separated_clusters(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([rng.normal(-1, 0.1, 100), rng.normal(1, 0.1, 100)])
        post = sample_posterior(x, ChainConfig(chains=2, burn_in=400,
                                               samples=400, seed=5))
        mu = post.mu.reshape(-1, 2).mean(axis=0)
        theta = post.theta.reshape(-1, 2).mean(axis=0)
        assert abs(mu[0] + 1.0) < 0.1
        assert abs(mu[1] - 1.0) < 0.1
        assert abs(theta[0] - 0.5) < 0.1
        assert not post.flagged

    def test_same_seed_identical_samples(self):
        x = np.random.default_rng(4).normal(size=60)
        cfg = ChainConfig(chains=1, burn_in=50, samples=80, seed=11)
        a = sample_posterior(x, cfg)
        b = sample_posterior(x, cfg)
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.sigma, b.sigma)
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_canonical_order_everywhere(self):
        x = np.random.default_rng(5).normal(size=80)
        post = sample_posterior(x, ChainConfig(chains=2, burn_in=60,
                                               samples=120, seed=2))
        assert (post.mu[:, :, 0] <= post.mu[:, :, 1]).all()

    def test_degenerate_constant_data_flagged_with_positive_sigma(self):
        x = np.full(40, 2.5)
        post = sample_posterior(x, ChainConfig(chains=2, burn_in=50,
                                               samples=100, seed=3))
        assert post.flagged
        assert any("degenerate" in note for note in post.notes)
        assert (post.sigma > 0).all()

    def test_single_cluster_matches_conjugate_closed_form(self):
        # all points pinned to cluster 1: every kept draw is an exact sample
        # from the Normal-Inverse-Gamma posterior, so the sample mean of mu
        # must match the closed-form posterior mean within Monte Carlo error
        rng = np.random.default_rng(6)
        x = rng.normal(5.0, 0.5, size=200)
        cfg = ChainConfig(chains=1, burn_in=1, samples=4000, seed=9)
        post = sample_posterior(x, cfg,
                                fixed_assignments=np.zeros(len(x), np.int64))
        n = len(x)
        kn = cfg.prior_kappa0 + n
        mn = (cfg.prior_kappa0 * cfg.prior_m0 + x.sum()) / kn
        an = cfg.prior_a0 + 0.5 * n
        s_dev = ((x - x.mean()) ** 2).sum()
        bn = (cfg.prior_b0 + 0.5 * s_dev
              + 0.5 * cfg.prior_kappa0 * n * (x.mean() - cfg.prior_m0) ** 2 / kn)
        mu_draws = post.mu[0, :, 0]
        se = mu_draws.std(ddof=1) / math.sqrt(len(mu_draws))
        assert abs(mu_draws.mean() - mn) < 3 * se
        # posterior mean of the variance: b_n / (a_n - 1)
        var_draws = post.sigma[0, :, 0] ** 2
        se_var = var_draws.std(ddof=1) / math.sqrt(len(var_draws))
        assert abs(var_draws.mean() - bn / (an - 1)) < 3 * se_var

    def test_too_few_points_rejected(self):
        with pytest.raises(DataError):
            sample_posterior(np.array([1.0]), ChainConfig())

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            sample_posterior(np.zeros(10), ChainConfig(chains=0))
        with pytest.raises(ConfigError):
            sample_posterior(np.zeros(10), ChainConfig(burn_in=0))

    def test_threaded_chains_match_sequential(self):
        x = np.random.default_rng(8).normal(size=50)
        cfg = ChainConfig(chains=3, burn_in=40, samples=60, seed=13)
        seq = sample_posterior(x, cfg, threads=1)
        par = sample_posterior(x, cfg, threads=3)
        np.testing.assert_array_equal(seq.mu, par.mu)
        np.testing.assert_array_equal(seq.theta, par.theta)


class TestRhat:
    def test_identical_constant_chains(self):
        assert split_rhat(np.full((4, 100), 3.0)) == 1.0

    def test_stuck_divergent_chains(self):
        chains = np.stack([np.zeros(100), np.ones(100)])
        assert split_rhat(chains) > 1.1

    def test_well_mixed_chains_near_one(self):
        rng = np.random.default_rng(10)
        samples = rng.normal(size=(4, 2500))
        assert split_rhat(samples) < 1.05

    def test_posterior_level_interface(self):
        post = constant_posterior()
        values = rhat(post)
        assert set(values) == {"mu1", "mu2", "sigma1", "sigma2",
                               "theta1", "theta2"}
        assert all(v == 1.0 for v in values.values())

    def test_too_short_rejected(self):
        with pytest.raises(DataError):
            split_rhat(np.zeros((2, 3)))


class TestClusterProb:
    def test_point_at_tight_cluster_mean(self):
        post = constant_posterior(mu=(-1.0, 1.0), sigma=(0.05, 0.05))
        p = posterior_cluster_prob(post, np.array([1.0]))
        assert p[1] > 0.99
        p = posterior_cluster_prob(post, np.array([-1.0]))
        assert p[0] > 0.99

    def test_equidistant_point_is_split(self):
        post = constant_posterior()
        p = posterior_cluster_prob(post, np.array([0.0]))
        np.testing.assert_allclose(p, [0.5, 0.5], atol=0.01)

    def test_simplex(self):
        post = constant_posterior(sigma=(0.5, 2.0), theta=(0.3, 0.7))
        rng = np.random.default_rng(11)
        for _ in range(10):
            p = posterior_cluster_prob(post, rng.normal(size=4))
            assert abs(p.sum() - 1.0) < 1e-12
            assert (p >= 0).all()

    def test_multidimensional_encoding_uses_all_dims(self):
        post = constant_posterior(sigma=(0.2, 0.2))
        near2 = posterior_cluster_prob(post, np.array([1.0, 0.9, 1.1]))
        assert near2[1] > 0.99


class TestEvaluateMixture:
    def separable(self, seed=0, n=100, d=3, flip=False):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=n).astype(bool)
        labels[:4] = [True, False, True, False]  # calibration slice has both
        center = np.where(labels, 1.0, -1.0)
        if flip:
            center = -center
        z = center[:, None] + rng.normal(0, 0.1, size=(n, d))
        return make_encodings(z), labels

    def test_separable_headline_ap(self):
        enc, labels = self.separable()
        post = constant_posterior(sigma=(0.15, 0.15))
        result = evaluate_mixture(post, enc, labels)
        assert result.orientation == "cluster2"
        assert result.headline_ap >= 0.95

    def test_orientation_flips_when_tool_is_low_cluster(self):
        enc, labels = self.separable(flip=True)
        post = constant_posterior(sigma=(0.15, 0.15))
        result = evaluate_mixture(post, enc, labels)
        assert result.orientation == "cluster1"
        assert result.headline_ap >= 0.95

    def test_reported_aps_recomputable_from_scores(self):
        enc, labels = self.separable(seed=1)
        post = constant_posterior(sigma=(0.15, 0.15))
        result = evaluate_mixture(post, enc, labels)
        np.testing.assert_allclose(
            result.ap_cluster2, average_precision(result.scores, labels),
            rtol=1e-12)
        np.testing.assert_allclose(
            result.ap_cluster1, average_precision(1.0 - result.scores, labels),
            rtol=1e-12)

    def test_no_positives_rejected(self):
        enc, labels = self.separable(seed=2)
        post = constant_posterior()
        with pytest.raises(DataError):
            evaluate_mixture(post, enc, np.zeros(len(labels), dtype=bool))


class TestArtifacts:
    def test_posterior_csv_round_trip(self, tmp_path):
        x = np.random.default_rng(12).normal(size=40)
        post = sample_posterior(x, ChainConfig(chains=2, burn_in=20,
                                               samples=30, seed=4))
        path = tmp_path / "posterior.csv"
        save_posterior_csv(post, str(path), config_hash="beef")
        loaded = load_posterior_csv(str(path))
        np.testing.assert_array_equal(loaded.mu, post.mu)
        np.testing.assert_array_equal(loaded.sigma, post.sigma)
        np.testing.assert_array_equal(loaded.theta, post.theta)
        first = path.read_text().splitlines()[0]
        assert first == "# config_hash=beef"

    def test_csv_columns(self, tmp_path):
        post = constant_posterior(chains=1, n=3)
        path = tmp_path / "posterior.csv"
        save_posterior_csv(post, str(path))
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["chain", "iter", "mu1", "mu2", "sigma1", "sigma2",
                           "theta1", "theta2"]
        assert len(rows) == 1 + 3

    def test_diagnostics_json(self, tmp_path):
        x = np.random.default_rng(13).normal(size=40)
        post = sample_posterior(x, ChainConfig(chains=2, burn_in=20,
                                               samples=30, seed=6))
        path = tmp_path / "diag.json"
        write_diagnostics(post, str(path), config_hash="cafe")
        payload = json.loads(path.read_text())
        assert payload["config_hash"] == "cafe"
        assert set(payload["rhat"]) == {"mu1", "mu2", "sigma1", "sigma2",
                                        "theta1", "theta2"}
        assert isinstance(payload["flagged"], bool)
