"""LSTM encoder-decoder over latent sequences with a mixture-density head.

The encoder rolls over a window of past frame encodings; its final hidden
state is the window's 64-D sequence encoding.  The decoder, initialized from
the encoder's final state, emits a 16-component diagonal Gaussian mixture per
future step so multimodal futures are not averaged into a blur.  Detection
reuses the cosine-query scheme on sequence encodings, aggregating window
responses to frames by per-frame max.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .artifacts import Encodings, SequenceEncodings, load_model, save_model
from .autodiff import Tape, Tensor
from .direct_eval import average_precision
from .errors import ArtifactError, ConfigError, DataError, NonFiniteError, ShapeError
from .optim import Adam

LOG_STD_MIN = -7.0
LOG_STD_MAX = 7.0

MODEL_KIND = "future_predictor"


@dataclass(frozen=True)
class FpConfig:
    past_length: int = 5
    future_length: int = 5
    hidden_size: int = 64
    components: int = 16
    learning_rate: float = 0.005
    epochs: int = 1000
    batch_size: int = 50
    seed: int = 0
    latent_dim: int = 20
    max_gap: int = 1

    def validate(self) -> None:
        if self.past_length < 1 or self.future_length < 1:
            raise ConfigError("sequence lengths must be >= 1")
        if self.components < 1:
            raise ConfigError(f"components must be >= 1, got {self.components}")
        if self.hidden_size < 1 or self.latent_dim < 1:
            raise ConfigError("hidden_size and latent_dim must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.max_gap < 1:
            raise ConfigError(f"max_gap must be >= 1, got {self.max_gap}")


@dataclass(frozen=True)
class SequenceWindows:
    """Sliding windows over an encoding sequence: past inputs, future targets."""

    past: np.ndarray      # (W, past_length, d)
    future: np.ndarray    # (W, future_length, d)
    indices: np.ndarray   # (W, past_length + future_length) raw frame indices

    def __len__(self) -> int:
        return self.past.shape[0]


@dataclass(frozen=True)
class MixtureStep:
    """One future step's mixture parameters (tensors keep gradients alive)."""

    logits: Tensor     # (B, M)
    means: Tensor      # (B, M, d)
    log_stds: Tensor   # (B, M, d), clamped

    @property
    def weights(self) -> np.ndarray:
        logits = self.logits.data
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def stds(self) -> np.ndarray:
        return np.exp(self.log_stds.data)


def _architecture(config: FpConfig) -> dict:
    d, h, m = config.latent_dim, config.hidden_size, config.components
    head = m * (1 + 2 * d)
    return {
        "enc_w": (d + h, 4 * h), "enc_b": (4 * h,),
        "dec_w": (d + h, 4 * h), "dec_b": (4 * h,),
        "head_w": (h, head), "head_b": (head,),
    }


def init_fp_params(config: FpConfig, rng: np.random.Generator,
                   dtype=np.float32) -> dict:
    """Uniform fan-in scaling; forget-gate biases start at 1."""
    h = config.hidden_size
    params = {}
    for name, shape in _architecture(config).items():
        if name.endswith("_b"):
            data = np.zeros(shape, dtype=dtype)
            if name in ("enc_b", "dec_b"):
                data[h:2 * h] = 1.0  # gate order is (input, forget, cell, output)
            params[name] = Tensor(data, requires_grad=True, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
            params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


def lstm_step(weight: Tensor, bias: Tensor, x: Tensor, hidden: Tensor,
              cell: Tensor) -> tuple:
    """One LSTM step: sigmoid input/forget/output gates, tanh candidate."""
    h = hidden.shape[1]
    if cell.shape != hidden.shape or weight.shape[1] != 4 * h:
        raise ShapeError(
            f"lstm_step: hidden {hidden.shape}, cell {cell.shape}, "
            f"weight {weight.shape} disagree")
    gates = ad.concat([x, hidden], axis=1) @ weight + bias
    i = ad.sigmoid(ad.narrow(gates, 1, 0, h))
    f = ad.sigmoid(ad.narrow(gates, 1, h, h))
    g = ad.tanh(ad.narrow(gates, 1, 2 * h, h))
    o = ad.sigmoid(ad.narrow(gates, 1, 3 * h, h))
    new_cell = f * cell + i * g
    new_hidden = o * ad.tanh(new_cell)
    return new_hidden, new_cell


def _zeros(batch: int, width: int, dtype) -> Tensor:
    return Tensor(np.zeros((batch, width), dtype=dtype))


def _roll_encoder(params: dict, past: Tensor) -> tuple:
    batch, steps, d = past.shape
    h = params["enc_b"].shape[0] // 4
    dtype = params["enc_w"].dtype
    hidden = _zeros(batch, h, dtype)
    cell = _zeros(batch, h, dtype)
    for t in range(steps):
        x = ad.narrow(past, 1, t, 1).reshape(batch, d)
        hidden, cell = lstm_step(params["enc_w"], params["enc_b"], x,
                                 hidden, cell)
    return hidden, cell


def _head(params: dict, hidden: Tensor, m: int, d: int) -> MixtureStep:
    out = hidden @ params["head_w"] + params["head_b"]
    batch = out.shape[0]
    logits = ad.narrow(out, 1, 0, m)
    means = ad.narrow(out, 1, m, m * d).reshape(batch, m, d)
    log_stds = ad.clip(ad.narrow(out, 1, m + m * d, m * d),
                       LOG_STD_MIN, LOG_STD_MAX).reshape(batch, m, d)
    return MixtureStep(logits=logits, means=means, log_stds=log_stds)


def encode_sequences(params: dict, past: np.ndarray) -> np.ndarray:
    """Sequence encodings (final encoder hidden states) for a window batch."""
    hidden, _ = _roll_encoder(params, Tensor(np.asarray(past)))
    return hidden.data


def encode_sequence(params: dict, past: np.ndarray) -> np.ndarray:
    """64-D sequence encoding of one window of past frame encodings."""
    past = np.asarray(past)
    if past.ndim != 2:
        raise ShapeError(f"expected a (steps, d) window, got {past.shape}")
    return encode_sequences(params, past[None])[0]


def _shape_of(params: dict) -> tuple:
    """(latent_dim, hidden, components) recovered from the weight shapes."""
    hidden = params["dec_b"].shape[0] // 4
    d = params["dec_w"].shape[0] - hidden
    m = params["head_w"].shape[1] // (1 + 2 * d)
    return d, hidden, m


def decode_future(params: dict, encoding, steps: int = 5,
                  cell: Optional[np.ndarray] = None) -> List[MixtureStep]:
    """Roll the decoder from a sequence encoding; one mixture per step.

    At inference the previous step's mixture mean (weight-averaged over
    components) is fed back as input; training uses teacher forcing (the
    true encoding) instead, see fit_fp.  The decoder cell state starts at
    zero unless an encoder cell state is supplied.
    """
    encoding = np.asarray(encoding)
    if encoding.ndim == 1:
        encoding = encoding[None]
    d, _, m = _shape_of(params)
    hidden = Tensor(encoding.astype(params["dec_w"].dtype))
    cell_t = Tensor(np.zeros_like(hidden.data) if cell is None
                    else np.asarray(cell, dtype=hidden.dtype))
    prev = _zeros(encoding.shape[0], d, hidden.dtype)
    out = []
    for _ in range(steps):
        hidden, cell_t = lstm_step(params["dec_w"], params["dec_b"], prev,
                                   hidden, cell_t)
        step = _head(params, hidden, m, d)
        out.append(step)
        mean_next = (step.weights[:, :, None] * step.means.data).sum(axis=1)
        prev = Tensor(mean_next.astype(hidden.dtype))
    return out


def mdn_nll(steps: List[MixtureStep], targets) -> Tensor:
    """Negative log-likelihood of targets under per-step mixtures.

    Summed over future steps, averaged over the batch; the inner
    sum-over-components runs through log-sum-exp.
    """
    targets = np.asarray(targets)
    if targets.ndim != 3 or targets.shape[1] != len(steps):
        raise ShapeError(
            f"targets {targets.shape} do not match {len(steps)} mixture steps")
    batch = targets.shape[0]
    total = None
    log2pi = float(np.log(2.0 * np.pi))
    for t, step in enumerate(steps):
        y = Tensor(np.ascontiguousarray(targets[:, t, :])
                   .astype(step.means.dtype)[:, None, :])  # (B, 1, d)
        diff = y - step.means
        inv_var = ad.exp(step.log_stds * -2.0)
        comp = ((diff * diff) * inv_var + step.log_stds * 2.0 + log2pi) \
            .sum(axis=2) * -0.5                            # (B, M)
        log_w = step.logits - ad.logsumexp(step.logits).reshape(batch, 1)
        step_ll = ad.logsumexp(log_w + comp)               # (B,)
        total = step_ll if total is None else total + step_ll
    return -total.mean()


def build_sequences(encodings, past: int = 5, future: int = 5,
                    max_gap: int = 1) -> SequenceWindows:
    """Stride-1 sliding windows; windows spanning an index gap are skipped.

    A gap is any jump between successive raw frame indices larger than
    ``max_gap`` (1 = strictly consecutive frames).
    """
    if isinstance(encodings, Encodings):
        vectors = encodings.samples
        indices = encodings.indices
    else:
        vectors = np.asarray(encodings)
        indices = np.arange(len(vectors))
    span = past + future
    n = len(vectors)
    if n < span:
        raise DataError(f"need at least {span} frames, have {n}")
    deltas = np.diff(indices)
    ok = deltas <= max_gap
    past_list = []
    future_list = []
    idx_list = []
    for s in range(n - span + 1):
        if ok[s:s + span - 1].all():
            past_list.append(vectors[s:s + past])
            future_list.append(vectors[s + past:s + span])
            idx_list.append(indices[s:s + span])
    if not past_list:
        raise DataError(
            f"no gap-free windows of length {span} (max_gap={max_gap})")
    return SequenceWindows(past=np.stack(past_list),
                           future=np.stack(future_list),
                           indices=np.stack(idx_list))


def _training_loss(params: dict, past: np.ndarray, future: np.ndarray,
                   config: FpConfig) -> Tensor:
    """Teacher-forced encoder-decoder NLL for one window batch."""
    batch, _, d = past.shape
    hidden, cell = _roll_encoder(params, Tensor(np.asarray(past)))
    prev = _zeros(batch, d, hidden.dtype)
    steps = []
    for t in range(config.future_length):
        hidden, cell = lstm_step(params["dec_w"], params["dec_b"], prev,
                                 hidden, cell)
        steps.append(_head(params, hidden, config.components, d))
        # teacher forcing: the true encoding becomes the next input
        prev = Tensor(np.ascontiguousarray(future[:, t, :])
                      .astype(hidden.dtype))
    return mdn_nll(steps, future)


def fit_fp(train_encodings, config: FpConfig) -> tuple:
    """Adam on the windowed NLL; returns (params, per-epoch mean NLL)."""
    config.validate()
    windows = build_sequences(train_encodings, past=config.past_length,
                              future=config.future_length,
                              max_gap=config.max_gap)
    d = windows.past.shape[2]
    if d != config.latent_dim:
        raise ConfigError(
            f"encodings have dimension {d}, config.latent_dim={config.latent_dim}")
    if len(windows) < config.batch_size:
        raise ConfigError(
            f"need at least batch_size={config.batch_size} windows, "
            f"have {len(windows)}")
    root = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss = root.spawn(2)
    params = init_fp_params(config, np.random.default_rng(init_ss))
    opt = Adam(params, lr=config.learning_rate)
    past = windows.past.astype(np.float32)
    future = windows.future.astype(np.float32)

    history = []
    n = len(windows)
    for epoch in range(config.epochs):
        order = np.random.default_rng(shuffle_ss.spawn(1)[0]).permutation(n)
        epoch_sum = 0.0
        batches = 0
        for batch_i, s in enumerate(range(0, n, config.batch_size)):
            chunk = order[s:s + config.batch_size]
            try:
                with Tape() as tape:
                    loss = _training_loss(params, past[chunk], future[chunk],
                                          config)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NonFiniteError("NLL is non-finite")
                grads = tape.backward(loss)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"epoch {epoch} batch {batch_i}: {exc}") from exc
            opt.step({name: grads[t] for name, t in params.items()})
            epoch_sum += value
            batches += 1
        history.append(epoch_sum / batches)
    return params, history


@dataclass(frozen=True)
class FpEvalResult:
    mean_ap: float
    query_aps: np.ndarray
    query_windows: np.ndarray       # window row index of each query
    sequences: SequenceEncodings    # all window encodings, for the artifact


def evaluate_fp(params: dict, encodings: Encodings, labels,
                config: FpConfig, max_gap: Optional[int] = None,
                config_hash: str = "") -> FpEvalResult:
    """Sequence-encoding cosine queries with per-frame max aggregation.

    Tool-majority windows query all other windows; a frame's response to a
    query is the max cosine over the (up to past_length) non-query windows
    whose past covers it; AP is computed per query over frame responses and
    averaged.
    """
    labels = np.asarray(labels).astype(bool)
    if len(labels) != len(encodings):
        raise DataError(
            f"labels length {len(labels)} does not match {len(encodings)} encodings")
    gap = config.max_gap if max_gap is None else max_gap
    windows = build_sequences(encodings, past=config.past_length,
                              future=config.future_length, max_gap=gap)
    label_of = dict(zip(encodings.indices.tolist(), labels.tolist()))
    past_idx = windows.indices[:, :config.past_length]
    vectors = np.concatenate([
        encode_sequences(params, windows.past[s:s + 512].astype(np.float32))
        for s in range(0, len(windows), 512)])
    sequences = SequenceEncodings(vectors=vectors.astype(np.float32),
                                  windows=past_idx.astype(np.int64),
                                  config_hash=config_hash)

    window_labels = np.array([
        sum(label_of[i] for i in row) * 2 > len(row) for row in past_idx.tolist()])
    queries = np.flatnonzero(window_labels)
    if len(queries) == 0:
        raise DataError("no tool-majority query sequence")

    norms = np.linalg.norm(vectors, axis=1)
    if (norms == 0).any():
        raise DataError("cosine: zero-norm sequence encoding")
    unit = vectors / norms[:, None]
    sims = unit @ unit.T

    # frame -> rows of windows whose past covers it
    frame_ids = np.unique(past_idx)
    coverage = {int(f): [] for f in frame_ids}
    for w, row in enumerate(past_idx.tolist()):
        for f in row:
            coverage[int(f)].append(w)
    frame_labels = np.array([label_of[int(f)] for f in frame_ids])

    aps = np.zeros(len(queries))
    for k, q in enumerate(queries):
        scores = []
        keep = []
        for fi, f in enumerate(frame_ids):
            rows = [w for w in coverage[int(f)] if w != q]
            if rows:
                scores.append(sims[q][rows].max())
                keep.append(fi)
        aps[k] = average_precision(np.asarray(scores), frame_labels[keep])
    return FpEvalResult(mean_ap=float(aps.mean()), query_aps=aps,
                        query_windows=queries, sequences=sequences)


def save_fp_checkpoint(params: dict, config: FpConfig, path: str,
                       config_hash: str = "") -> None:
    save_model(path, MODEL_KIND, asdict(config),
               {name: t.data for name, t in params.items()},
               config_hash=config_hash)


def load_fp_checkpoint(path: str) -> tuple:
    """Returns (params, config, config_hash) with shape validation."""
    _, config_dict, config_hash, tensors = load_model(path, expect_kind=MODEL_KIND)
    try:
        config = FpConfig(**config_dict)
    except TypeError as exc:
        raise ArtifactError(f"checkpoint config does not parse: {exc}")
    expected = _architecture(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise ArtifactError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise ArtifactError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"architecture wants {shape}")
    params = {name: Tensor(tensors[name], requires_grad=True)
              for name in expected}
    return params, config, config_hash
