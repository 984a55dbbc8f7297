"""Frame datasets: loading, splitting, synthetic generation, batching.

Frames are 64x64 RGB float arrays in [0, 1].  Tool-presence labels ride along
for evaluation only; every training-facing API hands out image batches with
no label access.  The synthetic generator stands in for endoscopy video: a
smoothly drifting low-frequency background (camera moving through anatomy)
plus, in labeled frames, a bright capsule-shaped instrument entering from a
frame edge with its own smooth motion.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ArtifactError, ConfigError

FRAME_SIZE = 64

_IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class FrameRecord:
    """One video frame: ordinal index, image in [0,1], optional eval label."""

    index: int
    image: np.ndarray
    label: Optional[bool] = None
    filename: str = ""


@dataclass(frozen=True)
class FrameDataset:
    """Ordered frames plus a per-frame held-out-test flag.

    Immutable after construction; safe to share across threads for reads.
    """

    frames: tuple
    test_mask: np.ndarray
    skipped_count: int = 0

    def __post_init__(self):
        if len(self.test_mask) != len(self.frames):
            raise ConfigError("test_mask length does not match frame count")
        indices = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ConfigError("frame indices must be strictly increasing")
        for f in self.frames:
            if f.image.shape != (FRAME_SIZE, FRAME_SIZE, 3):
                raise ConfigError(
                    f"frame {f.index}: expected {FRAME_SIZE}x{FRAME_SIZE}x3 image, "
                    f"got {f.image.shape}")
        if self.frames:
            lo = min(float(f.image.min()) for f in self.frames)
            hi = max(float(f.image.max()) for f in self.frames)
            if lo < 0.0 or hi > 1.0:
                raise ConfigError(f"pixel values outside [0,1]: [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.frames)

    def positions(self, split: Optional[str] = None) -> np.ndarray:
        """Positions (into .frames) of the requested split, in order."""
        if split is None:
            return np.arange(len(self.frames))
        if split == "train":
            return np.flatnonzero(~self.test_mask)
        if split == "test":
            return np.flatnonzero(self.test_mask)
        raise ConfigError(f"unknown split {split!r}")

    def images(self, split: Optional[str] = None) -> np.ndarray:
        pos = self.positions(split)
        if len(pos) == 0:
            return np.zeros((0, FRAME_SIZE, FRAME_SIZE, 3), dtype=np.float32)
        return np.stack([self.frames[p].image for p in pos])

    def raw_indices(self, split: Optional[str] = None) -> np.ndarray:
        return np.array([self.frames[p].index for p in self.positions(split)],
                        dtype=np.int64)

    def labels(self, split: Optional[str] = None) -> np.ndarray:
        pos = self.positions(split)
        out = np.zeros(len(pos), dtype=bool)
        for k, p in enumerate(pos):
            lab = self.frames[p].label
            if lab is None:
                raise ConfigError(
                    f"frame {self.frames[p].index} has no label; labels are "
                    "required for evaluation")
            out[k] = lab
        return out


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the stand-in video generator."""

    count: int = 1551
    prevalence: float = 0.658
    drift_speed: float = 0.4
    tool_length: float = 34.0
    tool_width: float = 11.0
    mean_run_length: float = 240.0
    seed: int = 0


def _preprocess(img: Image.Image) -> np.ndarray:
    """Resize so height = 64 (bilinear), center-crop columns to 64 wide."""
    img = img.convert("RGB")
    w, h = img.size
    if h != FRAME_SIZE:
        w = max(1, int(round(w * FRAME_SIZE / h)))
        img = img.resize((w, FRAME_SIZE), Image.BILINEAR)
    if w < FRAME_SIZE:
        # degenerate aspect ratio; stretch to full width rather than pad
        img = img.resize((FRAME_SIZE, FRAME_SIZE), Image.BILINEAR)
        w = FRAME_SIZE
    left = (w - FRAME_SIZE) // 2
    if w != FRAME_SIZE:
        img = img.crop((left, 0, left + FRAME_SIZE, FRAME_SIZE))
    return np.asarray(img, dtype=np.float32) / 255.0


def load_frames(directory: str, labels_file: Optional[str] = None) -> FrameDataset:
    """Load lexicographically ordered image files as a dataset.

    Unreadable images are skipped with a warning and counted.  A labels CSV
    (header ``filename,label``) that references a missing or skipped file is
    an error.
    """
    names = sorted(n for n in os.listdir(directory)
                   if os.path.splitext(n)[1].lower() in _IMAGE_EXTENSIONS)
    labels = {}
    if labels_file is not None:
        with open(labels_file, newline="") as fh:
            for row in csv.DictReader(fh):
                labels[row["filename"]] = bool(int(row["label"]))

    frames = []
    skipped = 0
    for name in names:
        path = os.path.join(directory, name)
        try:
            with Image.open(path) as img:
                image = _preprocess(img)
        except Exception as exc:  # PIL raises several unrelated types
            warnings.warn(f"skipping unreadable image {name}: {exc}")
            skipped += 1
            continue
        frames.append(FrameRecord(index=len(frames), image=image,
                                  label=labels.get(name), filename=name))

    loaded = {f.filename for f in frames}
    missing = sorted(set(labels) - loaded)
    if missing:
        raise ArtifactError(
            f"labels reference missing files: {', '.join(missing[:5])}")
    return FrameDataset(frames=tuple(frames),
                        test_mask=np.zeros(len(frames), dtype=bool),
                        skipped_count=skipped)


def split(dataset: FrameDataset, test_fraction: float = 0.2,
          seed: int = 0) -> FrameDataset:
    """Hold out every ceil(1/fraction)-th frame at a seeded phase offset.

    Striding makes the test set span the whole sequence instead of clumping
    at one point in the video.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0,1), got {test_fraction}")
    n = len(dataset)
    if n < 5:
        raise ConfigError(f"dataset too small to split: {n} frames")
    stride = int(np.ceil(1.0 / test_fraction))
    phase = int(np.random.default_rng(seed).integers(stride))
    mask = np.zeros(n, dtype=bool)
    mask[phase::stride] = True
    return FrameDataset(frames=dataset.frames, test_mask=mask,
                        skipped_count=dataset.skipped_count)


def _label_runs(count: int, prevalence: float, mean_run: float,
                rng: np.random.Generator) -> np.ndarray:
    """Exactly round(count*prevalence) positives, in contiguous runs."""
    n_pos = int(round(count * prevalence))
    if n_pos <= 0:
        return np.zeros(count, dtype=bool)
    if n_pos >= count:
        return np.ones(count, dtype=bool)
    n_neg = count - n_pos
    k = int(np.clip(round(n_pos / mean_run), 1, min(n_pos, n_neg + 1)))
    if k == 1:
        lengths = np.array([n_pos])
    else:
        cuts = np.sort(rng.choice(n_pos - 1, size=k - 1, replace=False) + 1)
        lengths = np.diff(np.concatenate(([0], cuts, [n_pos])))
    slots = np.sort(rng.choice(n_neg + 1, size=k, replace=False))
    labels = np.zeros(count, dtype=bool)
    pos = 0
    li = 0
    for slot in range(n_neg + 1):
        if li < k and slots[li] == slot:
            labels[pos:pos + lengths[li]] = True
            pos += lengths[li]
            li += 1
        if slot < n_neg:
            pos += 1
    return labels


def _background_world(rng: np.random.Generator,
                      shape=(192, 256)) -> np.ndarray:
    """Low-frequency warm tissue texture; brightness <= 0.64 in every channel."""
    coarse = rng.uniform(0.0, 1.0, size=(6, 8, 3))
    world = ndimage.zoom(coarse, (shape[0] / 6, shape[1] / 8, 1), order=3)
    lo, hi = world.min(), world.max()
    world = 0.14 + 0.22 * (world - lo) / (hi - lo)
    # pull toward red so the cool bright instrument is chromatically distinct
    return (world * np.array([1.0, 0.62, 0.55])).astype(np.float32)


# edge id -> (entry point builder, inward normal) with coords (row, col)
_EDGES = {
    0: (lambda e: (e, 0.0), (0.0, 1.0)),
    1: (lambda e: (e, 63.0), (0.0, -1.0)),
    2: (lambda e: (0.0, e), (1.0, 0.0)),
    3: (lambda e: (63.0, e), (-1.0, 0.0)),
}


def _capsule_alpha(rr: np.ndarray, cc: np.ndarray, a, b,
                   radius: float) -> np.ndarray:
    """Antialiased coverage of the capsule with axis segment a->b."""
    ar, ac = a
    br, bc = b
    dr, dc = br - ar, bc - ac
    denom = max(dr * dr + dc * dc, 1e-9)
    t = np.clip(((rr - ar) * dr + (cc - ac) * dc) / denom, 0.0, 1.0)
    dist = np.sqrt((rr - ar - t * dr) ** 2 + (cc - ac - t * dc) ** 2)
    return np.clip((radius + 0.8 - dist) / 1.6, 0.0, 1.0)


def generate_synthetic(config: SyntheticConfig) -> FrameDataset:
    """Stand-in video: drifting textured background, bright tool in labeled frames."""
    if not np.isfinite(config.prevalence) or not 0.0 <= config.prevalence <= 1.0:
        raise ConfigError(f"prevalence must lie in [0,1], got {config.prevalence}")
    if config.count < 1:
        raise ConfigError(f"frame count must be positive, got {config.count}")

    rng = np.random.default_rng(config.seed)
    labels = _label_runs(config.count, config.prevalence,
                         config.mean_run_length, rng)
    world = _background_world(rng)
    wh, ww = world.shape[:2]

    t = np.arange(config.count, dtype=np.float64)
    w1 = 2 * np.pi * config.drift_speed / 311.0
    w2 = 2 * np.pi * config.drift_speed / 473.0
    p1, p2, p3 = rng.uniform(0, 2 * np.pi, size=3)
    rows = ((wh - FRAME_SIZE) / 2 * (1 + 0.50 * np.sin(w1 * t + p1))).astype(int)
    cols = ((ww - FRAME_SIZE) / 2 * (1 + 0.50 * np.sin(w2 * t + p2))).astype(int)
    glow = 0.97 + 0.03 * np.sin(2 * np.pi * config.drift_speed * t / 197.0 + p3)

    images = np.empty((config.count, FRAME_SIZE, FRAME_SIZE, 3), dtype=np.float32)
    for i in range(config.count):
        crop = world[rows[i]:rows[i] + FRAME_SIZE, cols[i]:cols[i] + FRAME_SIZE]
        images[i] = crop * glow[i]

    rr, cc = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    tint = np.array([0.97, 0.98, 1.0], dtype=np.float32)
    radius = config.tool_width / 2.0

    # walk labeled runs; each run is one insertion episode of the instrument,
    # always through the same port (edge fixed per video, like a trocar)
    entry_fn, normal = _EDGES[int(rng.integers(4))]
    boundaries = np.flatnonzero(np.diff(labels.astype(np.int8)))
    starts = np.concatenate(([0], boundaries + 1))
    ends = np.concatenate((boundaries + 1, [config.count]))
    for s, e in zip(starts, ends):
        if not labels[s]:
            continue
        run = e - s
        e0 = rng.uniform(20.0, 44.0)
        swing = rng.uniform(2.0, 6.0)
        tilt = rng.uniform(-0.3, 0.3)
        d_hi = rng.uniform(34.0, 50.0)
        phase = rng.uniform(0, 2 * np.pi)
        nr, nc = normal
        for j in range(run):
            u = (j + 0.5) / run
            depth = 20.0 + (d_hi - 20.0) * np.sin(np.pi * u) ** 0.7
            ang = tilt + 0.12 * np.sin(2 * np.pi * u + phase)
            # rotate the inward normal by ang
            dr = nr * np.cos(ang) - nc * np.sin(ang)
            dc = nr * np.sin(ang) + nc * np.cos(ang)
            er, ec = entry_fn(e0 + swing * np.sin(np.pi * u + phase))
            tip = (er + dr * depth, ec + dc * depth)
            base = (er - dr * 6.0, ec - dc * 6.0)
            alpha = _capsule_alpha(rr, cc, base, tip, radius)[..., None]
            shade = rng.uniform(0.92, 0.98)
            images[s + j] = (images[s + j] * (1 - alpha)
                             + (shade * tint) * alpha)

    np.clip(images, 0.0, 1.0, out=images)
    frames = tuple(
        FrameRecord(index=i, image=images[i], label=bool(labels[i]),
                    filename=f"synth_{i:05d}")
        for i in range(config.count))
    return FrameDataset(frames=frames,
                        test_mask=np.zeros(config.count, dtype=bool))


def minibatches(dataset: FrameDataset, batch_size: int,
                seed: int = 0) -> Iterator[np.ndarray]:
    """One epoch of seeded-shuffle train batches; labels never exposed."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    pos = dataset.positions("train")
    order = np.random.default_rng(seed).permutation(len(pos))
    for s in range(0, len(pos), batch_size):
        chunk = pos[order[s:s + batch_size]]
        yield np.stack([dataset.frames[p].image for p in chunk])


def save_frames(dataset: FrameDataset, directory: str) -> None:
    """Write frames as 8-bit PNGs plus a ``labels.csv`` for labeled frames."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for frame in dataset.frames:
        name = frame.filename or f"frame_{frame.index:05d}"
        if os.path.splitext(name)[1].lower() not in _IMAGE_EXTENSIONS:
            name += ".png"
        arr = np.clip(np.rint(frame.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(directory, name))
        if frame.label is not None:
            rows.append((name, int(frame.label)))
    if rows:
        with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["filename", "label"])
            writer.writerows(rows)


def write_manifest(dataset: FrameDataset, path: str) -> None:
    """Audit CSV: index,filename,split,label (label blank when absent)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "filename", "split", "label"])
        for pos, frame in enumerate(dataset.frames):
            label = "" if frame.label is None else int(frame.label)
            split_name = "test" if dataset.test_mask[pos] else "train"
            writer.writerow([frame.index, frame.filename, split_name, label])
