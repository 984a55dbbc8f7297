"""Versioned binary containers for checkpoints and encoding files.

Every artifact opens with a 4-byte magic and a little-endian u32 version so
stale or foreign files fail fast, and every header carries the producing
run's config hash so pipeline stages can refuse to mix incompatible runs.
Tensor payloads are raw little-endian float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArtifactError

MODEL_MAGIC = b"MVAE"
ENCODING_MAGIC = b"ENCD"
SEQUENCE_MAGIC = b"SENC"
FORMAT_VERSION = 1


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ArtifactError(
            f"truncated file: wanted {n} bytes for {what}, got {len(data)}")
    return data


def _check_magic(fh, expected: bytes) -> None:
    magic = _read_exact(fh, 4, "magic")
    if magic != expected:
        raise ArtifactError(
            f"bad magic {magic!r}: expected {expected.decode()} file")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != FORMAT_VERSION:
        raise ArtifactError(
            f"unsupported format version {version} (supported: {FORMAT_VERSION})")


# -- model checkpoints ---------------------------------------------------------

def save_model(path: str, kind: str, config: dict, tensors: dict,
               config_hash: str = "") -> None:
    """Write a model checkpoint: JSON header plus ordered f32 payloads."""
    names = list(tensors)
    header = {
        "kind": kind,
        "config": config,
        "config_hash": config_hash,
        "tensors": [{"name": n, "shape": list(np.asarray(tensors[n]).shape)}
                    for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())


def load_model(path: str, expect_kind: str = None):
    """Read a checkpoint; returns (kind, config, config_hash, tensors)."""
    with open(path, "rb") as fh:
        _check_magic(fh, MODEL_MAGIC)
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, hlen, "header"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = _read_exact(fh, 4 * count, f"tensor {entry['name']!r}")
            tensors[entry["name"]] = (
                np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ArtifactError(
            f"checkpoint holds a {kind!r} model, expected {expect_kind!r}")
    return kind, header["config"], header.get("config_hash", ""), tensors


# -- per-frame encodings -------------------------------------------------------

@dataclass(frozen=True)
class Encodings:
    """Latent encodings for a list of frames, in frame order."""

    indices: np.ndarray      # (n,) raw frame indices
    means: np.ndarray        # (n, d)
    log_variances: np.ndarray
    samples: np.ndarray
    config_hash: str = ""

    def __post_init__(self):
        n, d = self.means.shape
        for name in ("log_variances", "samples"):
            if getattr(self, name).shape != (n, d):
                raise ArtifactError(f"{name} shape mismatch: expected {(n, d)}")
        if self.indices.shape != (n,):
            raise ArtifactError(f"indices shape mismatch: expected ({n},)")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]


def _frame_dtype(d: int) -> np.dtype:
    return np.dtype([("index", "<u4"), ("mean", "<f4", (d,)),
                     ("logvar", "<f4", (d,)), ("sample", "<f4", (d,))])


def save_encodings(path: str, enc: Encodings) -> None:
    d = enc.latent_dim
    hash_bytes = enc.config_hash.encode("utf-8")
    records = np.empty(len(enc), dtype=_frame_dtype(d))
    records["index"] = enc.indices
    records["mean"] = enc.means
    records["logvar"] = enc.log_variances
    records["sample"] = enc.samples
    with open(path, "wb") as fh:
        fh.write(ENCODING_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, len(enc), d,
                             len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(records.tobytes())


def load_encodings(path: str) -> Encodings:
    with open(path, "rb") as fh:
        _check_magic(fh, ENCODING_MAGIC)
        count, d, hlen = struct.unpack("<III",
                                       _read_exact(fh, 12, "encoding header"))
        config_hash = _read_exact(fh, hlen, "config hash").decode("utf-8")
        dtype = _frame_dtype(d)
        buf = _read_exact(fh, dtype.itemsize * count, "encoding records")
    records = np.frombuffer(buf, dtype=dtype)
    return Encodings(indices=records["index"].astype(np.int64),
                     means=records["mean"].copy(),
                     log_variances=records["logvar"].copy(),
                     samples=records["sample"].copy(),
                     config_hash=config_hash)


# -- sequence encodings --------------------------------------------------------

@dataclass(frozen=True)
class SequenceEncodings:
    """One vector per sliding window plus the window's past frame indices."""

    vectors: np.ndarray   # (n, 64)
    windows: np.ndarray   # (n, past_len) raw frame indices
    config_hash: str = ""

    def __post_init__(self):
        if self.vectors.shape[0] != self.windows.shape[0]:
            raise ArtifactError("window table length does not match vectors")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def save_sequence_encodings(path: str, enc: SequenceEncodings) -> None:
    n, d = enc.vectors.shape
    past_len = enc.windows.shape[1]
    hash_bytes = enc.config_hash.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SEQUENCE_MAGIC)
        fh.write(struct.pack("<IIIII", FORMAT_VERSION, n, d, past_len,
                             len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(np.ascontiguousarray(enc.windows, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(enc.vectors, dtype="<f4").tobytes())


def load_sequence_encodings(path: str) -> SequenceEncodings:
    with open(path, "rb") as fh:
        _check_magic(fh, SEQUENCE_MAGIC)
        n, d, past_len, hlen = struct.unpack(
            "<IIII", _read_exact(fh, 16, "sequence header"))
        config_hash = _read_exact(fh, hlen, "config hash").decode("utf-8")
        wbuf = _read_exact(fh, 4 * n * past_len, "window table")
        vbuf = _read_exact(fh, 4 * n * d, "sequence vectors")
    windows = np.frombuffer(wbuf, dtype="<u4").reshape(n, past_len)
    vectors = np.frombuffer(vbuf, dtype="<f4").reshape(n, d)
    return SequenceEncodings(vectors=vectors.copy(),
                             windows=windows.astype(np.int64),
                             config_hash=config_hash)
