"""Convolutional VAE over 64x64 frames with a choice of latent regularizer.

The encoder maps a frame to (mean, log-variance) of a d-dimensional Gaussian
posterior; the decoder maps a latent sample back to pixel space.  Training
minimizes reconstruction error plus either the analytic KL to the N(0,I)
prior or a kernel MMD between posterior samples and fresh prior samples,
weighted by a regularization coefficient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .artifacts import Encodings, load_model, save_model
from .autodiff import Tape, Tensor
from .dataset import FrameDataset, minibatches
from .errors import ArtifactError, ConfigError, NonFiniteError, ShapeError
from .optim import Adam

LOGVAR_MIN = -20.0
LOGVAR_MAX = 20.0

MODEL_KIND = "mmd_vae"


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 20
    reg_weight: float = 5.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 80
    objective: str = "mmd"
    bandwidth: str = "latent_dim"
    seed: int = 0

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.reg_weight < 0:
            raise ConfigError(f"reg_weight must be >= 0, got {self.reg_weight}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.objective not in ("mmd", "kl"):
            raise ConfigError(f"objective must be 'mmd' or 'kl', got {self.objective!r}")
        resolve_bandwidth(self)


def resolve_bandwidth(config: VaeConfig) -> float:
    """Kernel bandwidth gamma; the default ties it to the latent dimension."""
    if config.bandwidth == "latent_dim":
        return float(config.latent_dim)
    try:
        value = float(config.bandwidth)
    except (TypeError, ValueError):
        raise ConfigError(f"unknown bandwidth policy {config.bandwidth!r}")
    if value <= 0:
        raise ConfigError(f"bandwidth must be positive, got {value}")
    return value


def _architecture(d: int) -> dict:
    """Tensor name -> shape for the fixed 64x64 two-conv architecture."""
    return {
        "enc_conv1_w": (32, 3, 4, 4), "enc_conv1_b": (32,),
        "enc_conv2_w": (64, 32, 4, 4), "enc_conv2_b": (64,),
        "enc_fc1_w": (64 * 16 * 16, 512), "enc_fc1_b": (512,),
        "enc_fc2_w": (512, 256), "enc_fc2_b": (256,),
        "enc_fc3_w": (256, 2 * d), "enc_fc3_b": (2 * d,),
        "dec_fc1_w": (d, 256), "dec_fc1_b": (256,),
        "dec_fc2_w": (256, 512), "dec_fc2_b": (512,),
        "dec_fc3_w": (512, 64 * 16 * 16), "dec_fc3_b": (64 * 16 * 16,),
        "dec_tconv1_w": (64, 32, 4, 4), "dec_tconv1_b": (32,),
        "dec_tconv2_w": (32, 3, 4, 4), "dec_tconv2_b": (3,),
    }


def init_params(config: VaeConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict:
    """He-scaled random weights, zero biases."""
    params = {}
    for name, shape in _architecture(config.latent_dim).items():
        if name.endswith("_b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


def _to_nchw(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[1:] != (64, 64, 3):
        raise ShapeError(f"expected a (B,64,64,3) image batch, got {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def encode(params: dict, images) -> tuple:
    """Image batch -> (means, log_variances), each (B, d)."""
    x = _to_nchw(images)
    h = ad.relu(ad.conv2d(x, params["enc_conv1_w"], stride=2, padding=1)
                + params["enc_conv1_b"].reshape(1, -1, 1, 1))
    h = ad.relu(ad.conv2d(h, params["enc_conv2_w"], stride=2, padding=1)
                + params["enc_conv2_b"].reshape(1, -1, 1, 1))
    h = h.reshape(h.shape[0], 64 * 16 * 16)
    h = ad.relu(h @ params["enc_fc1_w"] + params["enc_fc1_b"])
    h = ad.relu(h @ params["enc_fc2_w"] + params["enc_fc2_b"])
    out = h @ params["enc_fc3_w"] + params["enc_fc3_b"]
    d = out.shape[1] // 2
    mean = ad.narrow(out, 1, 0, d)
    log_variance = ad.clip(ad.narrow(out, 1, d, d), LOGVAR_MIN, LOGVAR_MAX)
    return mean, log_variance


def decode(params: dict, z: Tensor) -> Tensor:
    """Latent batch (B, d) -> decoded images (B, 3, 64, 64) in (0, 1)."""
    h = ad.relu(z @ params["dec_fc1_w"] + params["dec_fc1_b"])
    h = ad.relu(h @ params["dec_fc2_w"] + params["dec_fc2_b"])
    h = ad.relu(h @ params["dec_fc3_w"] + params["dec_fc3_b"])
    h = h.reshape(h.shape[0], 64, 16, 16)
    h = ad.relu(ad.conv2d_transpose(h, params["dec_tconv1_w"], stride=2, padding=1)
                + params["dec_tconv1_b"].reshape(1, -1, 1, 1))
    h = ad.conv2d_transpose(h, params["dec_tconv2_w"], stride=2, padding=1)
    return ad.sigmoid(h + params["dec_tconv2_b"].reshape(1, -1, 1, 1))


def reparameterize(mean: Tensor, log_variance: Tensor,
                   rng: np.random.Generator) -> Tensor:
    """z = mean + exp(log_variance/2) * eps with eps ~ N(0, I)."""
    if mean.shape != log_variance.shape:
        raise ShapeError(
            f"reparameterize: mean {mean.shape} vs log_variance {log_variance.shape}")
    eps = rng.standard_normal(mean.shape).astype(mean.dtype, copy=False)
    return mean + ad.exp(log_variance * 0.5) * Tensor(eps)


def reconstruction_loss(decoded: Tensor, original: Tensor) -> Tensor:
    """Sum of squared pixel errors divided by batch size."""
    if decoded.shape != original.shape:
        raise ShapeError(
            f"reconstruction_loss: shapes {decoded.shape} vs {original.shape}")
    diff = decoded - original
    return (diff * diff).sum() * (1.0 / decoded.shape[0])


def kl_divergence_gaussian(mean: Tensor, log_variance: Tensor) -> Tensor:
    """Batch mean of KL(N(mean, exp(log_variance)) || N(0, I))."""
    term = mean * mean + ad.exp(log_variance) - log_variance - 1.0
    return (term.sum(axis=1) * 0.5).mean()


def _gram_mean(a: Tensor, b: Tensor, gamma: float) -> Tensor:
    sq_a = (a * a).sum(axis=1).reshape(-1, 1)
    sq_b = (b * b).sum(axis=1).reshape(1, -1)
    dist = sq_a + sq_b - (a @ ad.transpose(b)) * 2.0
    return ad.exp(dist * (-1.0 / (2.0 * gamma))).mean()


def mmd_vstat(samples_q, samples_p, bandwidth: Optional[float] = None) -> Tensor:
    """Biased V-statistic MMD^2 with an RBF kernel of bandwidth gamma.

    k(a, b) = exp(-|a - b|^2 / (2 gamma)); gamma defaults to the dimension.
    """
    q = samples_q if isinstance(samples_q, Tensor) else Tensor(samples_q)
    p = samples_p if isinstance(samples_p, Tensor) else Tensor(samples_p)
    if q.data.ndim != 2 or p.data.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ShapeError(
            f"mmd_vstat: incompatible sample shapes {q.shape} vs {p.shape}")
    if q.shape[0] == 0 or p.shape[0] == 0:
        raise ShapeError("mmd_vstat: empty sample set")
    gamma = float(q.shape[1]) if bandwidth is None else float(bandwidth)
    return (_gram_mean(q, q, gamma) + _gram_mean(p, p, gamma)
            - _gram_mean(q, p, gamma) * 2.0)


def vae_loss(params: dict, images, config: VaeConfig,
             rng: np.random.Generator) -> tuple:
    """Total objective plus its terms; terms are plain floats for logging."""
    x = _to_nchw(images)
    mean, log_variance = encode(params, x)
    z = reparameterize(mean, log_variance, rng)
    recon = reconstruction_loss(decode(params, z), x)
    if config.objective == "mmd":
        prior = rng.standard_normal(z.shape).astype(z.dtype, copy=False)
        divergence = mmd_vstat(z, Tensor(prior),
                               bandwidth=resolve_bandwidth(config))
        total = recon + divergence * config.reg_weight
        terms = {"recon": float(recon.data), "mmd": float(divergence.data)}
    else:
        divergence = kl_divergence_gaussian(mean, log_variance)
        total = recon + divergence
        terms = {"recon": float(recon.data), "kl": float(divergence.data)}
    terms["total"] = float(total.data)
    return total, terms


def fit(dataset: FrameDataset, config: VaeConfig) -> tuple:
    """Train on the dataset's train split; returns (params, epoch history).

    History entry e holds the epoch's mean of each loss term.  Seeded and
    deterministic when run single-threaded.
    """
    config.validate()
    n_train = len(dataset.positions("train"))
    if n_train < config.batch_size:
        raise ConfigError(
            f"need at least batch_size={config.batch_size} train frames, "
            f"have {n_train}")
    root = np.random.SeedSequence(config.seed)
    init_ss, noise_ss, shuffle_ss = root.spawn(3)
    params = init_params(config, np.random.default_rng(init_ss))
    noise_rng = np.random.default_rng(noise_ss)
    opt = Adam(params, lr=config.learning_rate)

    history = []
    for epoch in range(config.epochs):
        epoch_seed = int(shuffle_ss.spawn(1)[0].generate_state(1)[0])
        sums: dict = {}
        batches = 0
        for batch_i, batch in enumerate(
                minibatches(dataset, config.batch_size, seed=epoch_seed)):
            try:
                with Tape() as tape:
                    total, terms = vae_loss(params, batch, config, noise_rng)
                if not np.isfinite(terms["total"]):
                    raise NonFiniteError("total loss is non-finite")
                grads = tape.backward(total)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"epoch {epoch} batch {batch_i}: {exc}") from exc
            opt.step({name: grads[t] for name, t in params.items()})
            for key, value in terms.items():
                sums[key] = sums.get(key, 0.0) + value
            batches += 1
        history.append({k: v / batches for k, v in sums.items()})
    return params, history


def encode_dataset(params: dict, dataset: FrameDataset,
                   split: Optional[str] = None, seed: int = 0,
                   config_hash: str = "", chunk: int = 256) -> Encodings:
    """Encode the selected frames in order; one seeded sample per frame."""
    images = dataset.images(split)
    indices = dataset.raw_indices(split)
    means = []
    logvars = []
    for s in range(0, len(images), chunk):
        mean, log_variance = encode(params, images[s:s + chunk])
        means.append(mean.data)
        logvars.append(log_variance.data)
    mean = np.concatenate(means) if means else np.zeros((0, 0), np.float32)
    logvar = np.concatenate(logvars) if logvars else np.zeros((0, 0), np.float32)
    eps = np.random.default_rng(seed).standard_normal(mean.shape)
    sample = (mean + np.exp(logvar * 0.5) * eps).astype(np.float32)
    return Encodings(indices=indices, means=mean.astype(np.float32),
                     log_variances=logvar.astype(np.float32),
                     samples=sample, config_hash=config_hash)


def save_checkpoint(params: dict, config: VaeConfig, path: str,
                    config_hash: str = "") -> None:
    save_model(path, MODEL_KIND, asdict(config),
               {name: t.data for name, t in params.items()},
               config_hash=config_hash)


def load_checkpoint(path: str) -> tuple:
    """Returns (params, config, config_hash); validates tensor shapes."""
    _, config_dict, config_hash, tensors = load_model(path, expect_kind=MODEL_KIND)
    try:
        config = VaeConfig(**config_dict)
    except TypeError as exc:
        raise ArtifactError(f"checkpoint config does not parse: {exc}")
    expected = _architecture(config.latent_dim)
    for name, shape in expected.items():
        if name not in tensors:
            raise ArtifactError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise ArtifactError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"architecture wants {shape}")
    extra = set(tensors) - set(expected)
    if extra:
        raise ArtifactError(f"checkpoint has unexpected tensors: {sorted(extra)}")
    params = {name: Tensor(tensors[name], requires_grad=True)
              for name in expected}
    return params, config, config_hash
