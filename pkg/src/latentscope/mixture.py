"""Two-component Gaussian mixture over latent encodings, fit by MCMC.

Each latent dimension of each encoding is treated as an i.i.d. draw from a
scalar 2-component mixture with shared weights, so the data for inference is
the flattened set of latent scalars.  The sampler is collapsed Gibbs over
cluster assignments with a conjugate Normal-Inverse-Gamma prior on each
component's (mean, variance) and a symmetric Dirichlet prior on the weights:
assignments are swept with the component parameters integrated out, and the
kept (mu, sigma, theta) samples are drawn from their exact conditionals given
the assignments.  Kept samples are canonicalized to ascending mu so cluster 2
is always the higher-mean component.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy.special import logsumexp

from .artifacts import Encodings
from .direct_eval import average_precision
from .errors import ConfigError, DataError

RHAT_FLAG_THRESHOLD = 1.1


@dataclass(frozen=True)
class MixtureModel:
    """K=2 scalar Gaussian mixture, stored with means ascending."""

    means: tuple
    stds: tuple
    weights: tuple

    def __post_init__(self):
        means = tuple(float(v) for v in self.means)
        stds = tuple(float(v) for v in self.stds)
        weights = tuple(float(v) for v in self.weights)
        if not (len(means) == len(stds) == len(weights) == 2):
            raise ConfigError("mixture model must have exactly 2 components")
        if any(s <= 0 for s in stds):
            raise ConfigError(f"component stds must be positive, got {stds}")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(f"weights must form a simplex, got {weights}")
        if means[0] > means[1]:
            means = (means[1], means[0])
            stds = (stds[1], stds[0])
            weights = (weights[1], weights[0])
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        object.__setattr__(self, "weights", weights)


@dataclass(frozen=True)
class ChainConfig:
    chains: int = 4
    burn_in: int = 2500
    samples: int = 2500
    seed: int = 0
    prior_m0: float = 0.0
    prior_kappa0: float = 0.01
    prior_a0: float = 2.0
    prior_b0: float = 0.1
    prior_alpha: float = 1.0

    def validate(self) -> None:
        if self.chains < 1:
            raise ConfigError(f"chains must be >= 1, got {self.chains}")
        if self.burn_in < 1 or self.samples < 1:
            raise ConfigError("burn_in and samples must be >= 1")
        if self.prior_kappa0 <= 0 or self.prior_a0 <= 0 or self.prior_b0 <= 0:
            raise ConfigError("NIG prior hyperparameters must be positive")
        if self.prior_alpha <= 0:
            raise ConfigError("Dirichlet concentration must be positive")


@dataclass(frozen=True)
class MixturePosterior:
    """Kept samples per chain, canonicalized, plus convergence diagnostics."""

    mu: np.ndarray       # (chains, N, 2)
    sigma: np.ndarray    # (chains, N, 2)
    theta: np.ndarray    # (chains, N, 2)
    rhats: dict
    flagged: bool
    notes: tuple = ()

    @property
    def mean_model(self) -> MixtureModel:
        mu = self.mu.reshape(-1, 2).mean(axis=0)
        sigma = self.sigma.reshape(-1, 2).mean(axis=0)
        theta = self.theta.reshape(-1, 2).mean(axis=0)
        theta = theta / theta.sum()
        return MixtureModel(means=tuple(mu), stds=tuple(sigma),
                            weights=tuple(theta))

    def flat(self) -> tuple:
        return (self.mu.reshape(-1, 2), self.sigma.reshape(-1, 2),
                self.theta.reshape(-1, 2))


def _as_scalar_data(encodings) -> np.ndarray:
    if isinstance(encodings, Encodings):
        data = encodings.samples
    else:
        data = np.asarray(encodings)
    return np.ascontiguousarray(data, dtype=np.float64).ravel()


def _component_log_density(x, means, stds) -> np.ndarray:
    """log N(x | mu_c, sigma_c) for each component; x broadcast over rows."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    means = np.asarray(means, dtype=np.float64)
    var = np.asarray(stds, dtype=np.float64) ** 2
    return -0.5 * (np.log(2 * np.pi * var) + (x - means) ** 2 / var)


def mixture_log_likelihood(model: MixtureModel, encodings) -> float:
    """Sum over every latent scalar of log sum_c theta_c N(z | mu_c, sigma_c)."""
    if any(s <= 0 for s in model.stds):
        raise ConfigError("component stds must be positive")
    data = _as_scalar_data(encodings)
    comp = _component_log_density(data, model.means, model.stds)
    weights = np.asarray(model.weights, dtype=np.float64)
    return float(logsumexp(comp, axis=-1, b=weights).sum())


@njit(cache=True, nogil=True)
def _gibbs_sweep(x, assign, u, alpha, m0, kappa0, a0, b0, lg_a, lg_a5):
    """One collapsed-Gibbs pass over all points, updating assign in place.

    Sufficient statistics are rebuilt on entry so floating-point drift from
    incremental updates cannot accumulate across sweeps.
    """
    n = x.shape[0]
    counts = np.zeros(2, np.int64)
    sums = np.zeros(2, np.float64)
    sumsq = np.zeros(2, np.float64)
    for i in range(n):
        k = assign[i]
        counts[k] += 1
        sums[k] += x[i]
        sumsq[k] += x[i] * x[i]
    lp = np.zeros(2, np.float64)
    for i in range(n):
        xi = x[i]
        k_old = assign[i]
        counts[k_old] -= 1
        sums[k_old] -= xi
        sumsq[k_old] -= xi * xi
        for k in range(2):
            nk = counts[k]
            kn = kappa0 + nk
            an = a0 + 0.5 * nk
            if nk > 0:
                xbar = sums[k] / nk
                s_dev = sumsq[k] - nk * xbar * xbar
                if s_dev < 0.0:
                    s_dev = 0.0
                bn = (b0 + 0.5 * s_dev
                      + 0.5 * kappa0 * nk * (xbar - m0) * (xbar - m0) / kn)
                mn = (kappa0 * m0 + sums[k]) / kn
            else:
                bn = b0
                mn = m0
            # Student-t posterior predictive of the NIG model
            df = 2.0 * an
            scale2 = bn * (kn + 1.0) / (an * kn)
            tz = (xi - mn) * (xi - mn) / scale2
            lp[k] = (lg_a5[nk] - lg_a[nk]
                     - 0.5 * math.log(math.pi * df * scale2)
                     - 0.5 * (df + 1.0) * math.log1p(tz / df)
                     + math.log(nk + alpha))
        m = lp[0] if lp[0] > lp[1] else lp[1]
        p0 = math.exp(lp[0] - m)
        p1 = math.exp(lp[1] - m)
        k_new = 0 if u[i] * (p0 + p1) < p0 else 1
        assign[i] = k_new
        counts[k_new] += 1
        sums[k_new] += xi
        sumsq[k_new] += xi * xi


def _cluster_stats(x: np.ndarray, assign: np.ndarray) -> tuple:
    counts = np.bincount(assign, minlength=2).astype(np.int64)
    sums = np.bincount(assign, weights=x, minlength=2)
    sumsq = np.bincount(assign, weights=x * x, minlength=2)
    return counts, sums, sumsq


def _draw_params(rng, counts, sums, sumsq, cfg: ChainConfig) -> tuple:
    """Exact conditional draw of (mu, sigma, theta) given assignments."""
    theta = rng.dirichlet(cfg.prior_alpha + counts)
    mu = np.empty(2)
    sigma = np.empty(2)
    for k in range(2):
        nk = int(counts[k])
        kn = cfg.prior_kappa0 + nk
        mn = (cfg.prior_kappa0 * cfg.prior_m0 + sums[k]) / kn
        an = cfg.prior_a0 + 0.5 * nk
        if nk > 0:
            xbar = sums[k] / nk
            s_dev = max(sumsq[k] - nk * xbar * xbar, 0.0)
            bn = (cfg.prior_b0 + 0.5 * s_dev
                  + 0.5 * cfg.prior_kappa0 * nk
                  * (xbar - cfg.prior_m0) ** 2 / kn)
        else:
            bn = cfg.prior_b0
        var = bn / rng.standard_gamma(an)
        mu[k] = mn + math.sqrt(var / kn) * rng.standard_normal()
        sigma[k] = math.sqrt(var)
    return mu, sigma, theta


def _run_chain(x: np.ndarray, cfg: ChainConfig, seed_seq,
               fixed_assignments: Optional[np.ndarray]) -> tuple:
    rng = np.random.default_rng(seed_seq)
    n = x.shape[0]
    lg_a = np.array([math.lgamma(cfg.prior_a0 + 0.5 * k) for k in range(n + 1)])
    lg_a5 = np.array([math.lgamma(cfg.prior_a0 + 0.5 * k + 0.5)
                      for k in range(n + 1)])
    if fixed_assignments is None:
        assign = rng.integers(0, 2, size=n).astype(np.int64)
    else:
        assign = fixed_assignments.astype(np.int64).copy()
    mu = np.empty((cfg.samples, 2))
    sigma = np.empty((cfg.samples, 2))
    theta = np.empty((cfg.samples, 2))
    for sweep in range(cfg.burn_in + cfg.samples):
        if fixed_assignments is None:
            u = rng.random(n)
            _gibbs_sweep(x, assign, u, cfg.prior_alpha, cfg.prior_m0,
                         cfg.prior_kappa0, cfg.prior_a0, cfg.prior_b0,
                         lg_a, lg_a5)
        if sweep >= cfg.burn_in:
            counts, sums, sumsq = _cluster_stats(x, assign)
            m, s, t = _draw_params(rng, counts, sums, sumsq, cfg)
            k = sweep - cfg.burn_in
            # ascending-mu canonicalization; skipped when assignments are
            # pinned because the labels then identify the clusters
            if fixed_assignments is None and m[0] > m[1]:
                m, s, t = m[::-1], s[::-1], t[::-1]
            mu[k] = m
            sigma[k] = s
            theta[k] = t
    return mu, sigma, theta


def sample_posterior(encodings, config: ChainConfig,
                     fixed_assignments: Optional[np.ndarray] = None,
                     threads: int = 1) -> MixturePosterior:
    """Run independent seeded chains; returns kept samples plus diagnostics.

    ``fixed_assignments`` pins every point's cluster (no collapsed sweeps and
    no canonicalization), which reduces each kept draw to an exact conjugate
    posterior sample; used for closed-form correctness checks.
    """
    config.validate()
    x = _as_scalar_data(encodings)
    if x.size < 2:
        raise DataError(f"need at least 2 scalar observations, got {x.size}")
    notes = []
    if x.max() == x.min():
        notes.append("degenerate input: zero variance")
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    run = lambda s: _run_chain(x, config, s, fixed_assignments)
    if threads > 1 and config.chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    mu = np.stack([r[0] for r in results])
    sigma = np.stack([r[1] for r in results])
    theta = np.stack([r[2] for r in results])
    rhats = _all_rhats(mu, sigma, theta)
    flagged = bool(notes) or any(r > RHAT_FLAG_THRESHOLD for r in rhats.values())
    return MixturePosterior(mu=mu, sigma=sigma, theta=theta, rhats=rhats,
                            flagged=flagged, notes=tuple(notes))


def split_rhat(samples: np.ndarray) -> float:
    """Split-chain Gelman-Rubin potential scale reduction for one scalar.

    Chains are halved so single-chain runs still get a diagnostic.  Constant
    identical chains score exactly 1 (zero-variance guard).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise DataError(f"expected (chains, samples), got {samples.shape}")
    chains, n = samples.shape
    half = n // 2
    if chains * 2 < 2 or half < 2:
        raise DataError("need at least 2 split sequences of length >= 2")
    seqs = samples[:, :2 * half].reshape(chains * 2, half)
    within = seqs.var(axis=1, ddof=1).mean()
    between = half * seqs.mean(axis=1).var(ddof=1)
    # constant sequences leave rounding residue, not real variance
    floor = 1e-24 * max(1.0, float((samples * samples).mean()))
    if within <= floor:
        return 1.0 if between <= floor else float("inf")
    var_plus = (half - 1) / half * within + between / half
    return float(np.sqrt(var_plus / within))


def _all_rhats(mu, sigma, theta) -> dict:
    return {
        "mu1": split_rhat(mu[:, :, 0]), "mu2": split_rhat(mu[:, :, 1]),
        "sigma1": split_rhat(sigma[:, :, 0]), "sigma2": split_rhat(sigma[:, :, 1]),
        "theta1": split_rhat(theta[:, :, 0]), "theta2": split_rhat(theta[:, :, 1]),
    }


def rhat(posterior: MixturePosterior) -> dict:
    """Per-parameter split R-hat recomputed from the stored samples."""
    return _all_rhats(posterior.mu, posterior.sigma, posterior.theta)


def _cluster2_scores(posterior: MixturePosterior, z: np.ndarray,
                     block: int = 2000) -> np.ndarray:
    """P(cluster 2 | z, params) averaged over kept samples, one per row of z.

    Each row's likelihood under a (mu, sigma) sample depends on the row only
    through sum(z) and sum(z^2), so frames and samples vectorize cleanly.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    d = z.shape[1]
    s1 = z.sum(axis=1)[:, None]
    ss = (z * z).sum(axis=1)[:, None]
    mu, sigma, theta = posterior.flat()
    total = np.zeros(z.shape[0])
    n_samples = mu.shape[0]
    with np.errstate(divide="ignore"):
        log_theta = np.log(theta)
    for s in range(0, n_samples, block):
        m = mu[s:s + block]
        var = sigma[s:s + block] ** 2
        t = log_theta[s:s + block]
        ll = []
        for c in range(2):
            quad = ss - 2.0 * m[:, c] * s1 + d * m[:, c] ** 2
            ll.append(t[:, c] - 0.5 * d * np.log(2 * np.pi * var[:, c])
                      - quad / (2.0 * var[:, c]))
        # per-sample membership posterior, then Monte Carlo average
        p2 = 1.0 / (1.0 + np.exp(np.clip(ll[0] - ll[1], -700.0, 700.0)))
        total += p2.sum(axis=1)
    return total / n_samples


def posterior_cluster_prob(posterior: MixturePosterior, encoding) -> np.ndarray:
    """Posterior membership probabilities (cluster 1, cluster 2) for one encoding."""
    z = np.asarray(encoding, dtype=np.float64).reshape(1, -1)
    p2 = float(_cluster2_scores(posterior, z)[0])
    return np.array([1.0 - p2, p2])


@dataclass(frozen=True)
class MixtureEvalResult:
    scores: np.ndarray          # P(cluster 2) per frame
    ap_cluster2: float          # cluster 2 treated as "tool", full set
    ap_cluster1: float          # cluster 1 treated as "tool", full set
    orientation: str            # which orientation the calibration chose
    headline_ap: float          # chosen orientation on the non-calibration frames
    calibration_count: int


def evaluate_mixture(posterior: MixturePosterior, encodings: Encodings,
                     labels, calibration_fraction: float = 0.2) -> MixtureEvalResult:
    """Score frames by P(cluster 2), orient on a leading calibration slice.

    Cluster identity carries no label information, so the tool cluster is
    chosen by AP on the first ``calibration_fraction`` of frames; the
    headline AP is measured on the remaining frames only.
    """
    labels = np.asarray(labels).astype(bool)
    z = encodings.samples if isinstance(encodings, Encodings) else np.asarray(encodings)
    if len(labels) != len(z):
        raise DataError(
            f"labels length {len(labels)} does not match {len(z)} encodings")
    if not labels.any():
        raise DataError("evaluate_mixture: no positive labels")
    scores = _cluster2_scores(posterior, z)
    ap_c2 = average_precision(scores, labels)
    ap_c1 = average_precision(1.0 - scores, labels)
    n_cal = max(1, int(round(calibration_fraction * len(labels))))
    try:
        cal2 = average_precision(scores[:n_cal], labels[:n_cal])
        cal1 = average_precision(1.0 - scores[:n_cal], labels[:n_cal])
        orientation = "cluster2" if cal2 >= cal1 else "cluster1"
    except DataError:
        orientation = "cluster2"  # unlabeled calibration slice; keep default
    rest_scores = scores[n_cal:] if orientation == "cluster2" else 1.0 - scores[n_cal:]
    headline = average_precision(rest_scores, labels[n_cal:])
    return MixtureEvalResult(scores=scores, ap_cluster2=ap_c2,
                             ap_cluster1=ap_c1, orientation=orientation,
                             headline_ap=headline, calibration_count=n_cal)


# -- artifact IO ---------------------------------------------------------------

_CSV_COLUMNS = ["chain", "iter", "mu1", "mu2", "sigma1", "sigma2",
                "theta1", "theta2"]


def save_posterior_csv(posterior: MixturePosterior, path: str,
                       config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(",".join(_CSV_COLUMNS) + "\n")
        chains, n, _ = posterior.mu.shape
        for c in range(chains):
            for i in range(n):
                row = [str(c), str(i)]
                row += [repr(float(v)) for v in
                        (*posterior.mu[c, i], *posterior.sigma[c, i],
                         *posterior.theta[c, i])]
                fh.write(",".join(row) + "\n")


def load_posterior_csv(path: str) -> MixturePosterior:
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("chain,"):
                continue
            rows.append(line.strip().split(","))
    if not rows:
        raise DataError(f"no posterior samples in {path}")
    chains = max(int(r[0]) for r in rows) + 1
    n = len(rows) // chains
    mu = np.empty((chains, n, 2))
    sigma = np.empty((chains, n, 2))
    theta = np.empty((chains, n, 2))
    for r in rows:
        c, i = int(r[0]), int(r[1])
        mu[c, i] = (float(r[2]), float(r[3]))
        sigma[c, i] = (float(r[4]), float(r[5]))
        theta[c, i] = (float(r[6]), float(r[7]))
    rhats = _all_rhats(mu, sigma, theta)
    flagged = any(v > RHAT_FLAG_THRESHOLD for v in rhats.values())
    return MixturePosterior(mu=mu, sigma=sigma, theta=theta, rhats=rhats,
                            flagged=flagged)


def write_diagnostics(posterior: MixturePosterior, path: str,
                      config_hash: str = "") -> None:
    payload = {
        "config_hash": config_hash,
        "rhat": posterior.rhats,
        "flagged": posterior.flagged,
        "notes": list(posterior.notes),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
