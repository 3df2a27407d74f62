"""Datasets: CIFAR-10 binary layout IO, synthetic generators, batching.

Images are float64 channel-first arrays in [0,1]; pixels are scaled by 1/255
and never further normalized. Synthetic sets are quantized to the same 1/255
grid so exporting them to the binary layout and reloading is bit-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes (R, G, B planes)
SIDE = 32
CHANNELS = 3

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"

DATA_DIR_ENV = "COAT_DATA_DIR"


class DatasetError(Exception):
    """Missing or malformed dataset files / generator misuse."""


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0,1]
    labels: np.ndarray  # (N,) int64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError(f"bad dataset shapes {self.images.shape} / {self.labels.shape}")
        if len(self.labels) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixels outside [0,1]")
        self.meta.setdefault("label_counts", np.bincount(
            self.labels, minlength=int(self.labels.max(initial=-1)) + 1).tolist())

    def __len__(self) -> int:
        return len(self.labels)


def _read_batch_file(path: Path):
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise DatasetError(f"{path}: size {len(raw)} is not a multiple of {RECORD_BYTES}")
    n = len(raw) // RECORD_BYTES
    data = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = data[:, 0]
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{path}: label byte {int(labels[i])} >= 10 at record {i} "
                           f"(byte offset {i * RECORD_BYTES})")
    images = data[:, 1:].reshape(n, CHANNELS, SIDE, SIDE).astype(np.float64) / 255.0
    return images, labels.astype(np.int64)


def _resolve_root(root) -> Path:
    root = Path(root)
    # accept either the directory itself or the standard extracted folder
    nested = root / "cifar-10-batches-bin"
    if not (root / TEST_FILE).exists() and (nested / TEST_FILE).exists():
        return nested
    return root


def load_cifar10(root) -> tuple[ImageDataset, ImageDataset]:
    """Load the binary-layout batches: data_batch_1..5.bin + test_batch.bin.

    Each record is one label byte followed by 3072 pixel bytes (red, green,
    blue planes, row-major).
    """
    root = _resolve_root(root)
    train_paths = [root / f for f in TRAIN_FILES if (root / f).exists()]
    if not train_paths:
        raise DatasetError(f"{root}: no data_batch_*.bin files found")
    test_path = root / TEST_FILE
    if not test_path.exists():
        raise DatasetError(f"{root}: missing {TEST_FILE}")
    xs, ys = zip(*(_read_batch_file(p) for p in train_paths))
    train = ImageDataset(np.concatenate(xs), np.concatenate(ys),
                         meta={"source": str(root), "split": "train"})
    test = ImageDataset(*_read_batch_file(test_path),
                        meta={"source": str(root), "split": "test"})
    return train, test


def write_binary(root, train: ImageDataset, test: ImageDataset,
                 records_per_file: int = 10000) -> None:
    """Write datasets in the binary batch layout (inverse of load_cifar10)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    def encode(ds: ImageDataset) -> np.ndarray:
        px = np.rint(ds.images * 255.0)
        if not np.allclose(px, ds.images * 255.0, atol=1e-6):
            raise DatasetError("pixels are not on the 1/255 grid; refusing lossy export")
        rec = np.empty((len(ds), RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = ds.labels
        rec[:, 1:] = px.reshape(len(ds), -1).astype(np.uint8)
        return rec

    rec = encode(train)
    chunks = [rec[i:i + records_per_file] for i in range(0, len(rec), records_per_file)]
    if len(chunks) > len(TRAIN_FILES):
        raise DatasetError(f"train split needs {len(chunks)} files; layout has {len(TRAIN_FILES)}")
    for name, chunk in zip(TRAIN_FILES, chunks):
        (root / name).write_bytes(chunk.tobytes())
    (root / TEST_FILE).write_bytes(encode(test).tobytes())


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def _smooth_field(rng, sigma: float, channels: int = CHANNELS,
                  side: int = SIDE) -> np.ndarray:
    """One Gaussian-blurred white-noise field, standardized to zero mean and
    unit variance across all pixels. Blur is applied in the Fourier domain."""
    f = rng.standard_normal((channels, side, side))
    fy = np.fft.fftfreq(side)[:, None]
    fx = np.fft.rfftfreq(side)[None, :]
    spec = np.exp(-2.0 * np.pi ** 2 * sigma ** 2 * (fy ** 2 + fx ** 2))
    f = np.fft.irfft2(np.fft.rfft2(f) * spec[None], s=(side, side))
    return (f - f.mean()) / max(f.std(), 1e-12)


def make_synthetic(n: int, num_classes: int = 4, side: int = 8, channels: int = 1,
                   seed: int = 0, signal: float = 0.35, noise: float = 0.03,
                   margin: float = 0.1) -> ImageDataset:
    """Gaussian blobs around per-class orthonormal directions.

    Linearly separable by construction: samples whose best-vs-runner-up score
    under the generating directions falls below ``margin`` are redrawn.
    """
    if n < num_classes:
        raise DatasetError(f"n={n} smaller than num_classes={num_classes}")
    d = channels * side * side
    if num_classes > d:
        raise DatasetError("more classes than pixels")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, num_classes)))
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, d))
    for i in range(n):
        for _ in range(1000):
            x = 0.5 + signal * basis[:, labels[i]] + noise * rng.standard_normal(d)
            # score the centered image: the flat 0.5 background is not signal
            scores = basis.T @ (x - 0.5)
            top = scores[labels[i]]
            others = np.delete(scores, labels[i])
            if top - others.max() >= margin:
                break
        else:
            raise DatasetError("rejection sampling stuck; margin too demanding "
                               f"for signal={signal}, noise={noise}")
        images[i] = x
    images = _quantize(images.reshape(n, channels, side, side))
    return ImageDataset(images, labels, meta={
        "generator": "synthetic-blobs", "seed": seed, "signal": signal,
        "noise": noise, "margin": margin})


# Calibrated amplitudes for the CIFAR-substitute generator. Four properties
# matter for adversarial-training experiments on small CNNs and each maps to
# one knob:
#   * signal / template_sigma: smooth class templates at an amplitude where
#     cross-pair structure is robustly separable, so training has an honest
#     backbone and never degenerates;
#   * pair_contrast: classes come in confusable pairs, base +/- contrast *
#     diff with the diff field normalized to unit peak. Every pixel then
#     separates a pair by at most 2 * signal * contrast; once that is below
#     2 * eps, an l-inf adversary maps either pair member onto the other's
#     neighborhood exactly, so NO classifier is robust on pair identity, yet
#     clean fitting stays easy. Single-step attacks computed from the model's
#     own gradient leak the label, so pair identity is "robust" in a
#     single-step curriculum only through gradient masking;
#   * label_noise: a slice of training samples carries a random label no
#     pixel feature predicts, deepening the masking incentive and pushing
#     post-collapse alignment to the floor;
#   * brightness: per-image channel shifts stop a bias from standing in for
#     brightness-invariant features, forcing filters that pass brightness to
#     show up in noise-amplification diagnostics.
SURROGATE_DEFAULTS = dict(signal=0.06, template_sigma=3.0, pair_contrast=0.5,
                          label_noise=0.35,
                          brightness=0.03, pixel_noise=0.005)


def surrogate_templates(num_classes: int, template_seed: int, sigma: float,
                        pair_contrast: float) -> np.ndarray:
    """Class templates in confusable pairs: classes 2j and 2j+1 share a base
    field and differ by +/- pair_contrast times a peak-normalized second
    field, so no single pixel separates a pair by more than 2 * signal *
    pair_contrast. The final division keeps per-template variance at 1."""
    trng = np.random.default_rng(np.random.SeedSequence([template_seed]))
    out = []
    for j in range((num_classes + 1) // 2):
        base = _smooth_field(trng, sigma)
        diff = _smooth_field(trng, sigma)
        diff = diff / np.abs(diff).max()
        scale = float(np.sqrt(1.0 + pair_contrast ** 2 * diff.var()))
        out.append((base + pair_contrast * diff) / scale)
        out.append((base - pair_contrast * diff) / scale)
    return np.stack(out[:num_classes])


def make_cifar_surrogate(n: int, seed: int = 0, num_classes: int = 10,
                         template_seed: int = 7, **overrides) -> ImageDataset:
    """CIFAR-shaped synthetic images: smooth paired class templates plus
    brightness jitter, pixel noise, and a label-noise slice.

    All class structure comes from ``template_seed`` (shared across splits);
    sample identity comes from ``seed``.
    """
    knobs = dict(SURROGATE_DEFAULTS)
    bad = set(overrides) - set(knobs)
    if bad:
        raise DatasetError(f"unknown surrogate options {sorted(bad)}")
    knobs.update(overrides)
    templates = surrogate_templates(num_classes, template_seed,
                                    knobs["template_sigma"],
                                    knobs["pair_contrast"])

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    true = rng.integers(0, num_classes, size=n)
    labels = true.copy()
    flip = rng.random(n) < knobs["label_noise"]
    labels[flip] = rng.integers(0, num_classes, size=int(flip.sum()))
    imgs = np.empty((n, CHANNELS, SIDE, SIDE))
    for i in range(n):
        shift = knobs["brightness"] * rng.standard_normal((CHANNELS, 1, 1))
        imgs[i] = (0.5 + shift + knobs["signal"] * templates[true[i]]
                   + knobs["pixel_noise"] * rng.standard_normal((CHANNELS, SIDE, SIDE)))
    return ImageDataset(_quantize(imgs), labels, meta={
        "generator": "cifar-surrogate", "seed": seed,
        "template_seed": template_seed, **knobs})


def surrogate_pair(n_train: int, n_test: int, seed: int = 0,
                   **overrides) -> tuple[ImageDataset, ImageDataset]:
    """Train/test split sharing one template bank. Label noise is a training
    corruption only; the test half always carries true labels."""
    train = make_cifar_surrogate(n_train, seed=seed * 2 + 1, **overrides)
    test = make_cifar_surrogate(n_test, seed=seed * 2 + 2,
                                **{**overrides, "label_noise": 0.0})
    return train, test


def subsample(ds: ImageDataset, n: int, seed: int = 0) -> ImageDataset:
    """Deterministic random subset without replacement."""
    if n > len(ds):
        raise DatasetError(f"cannot subsample {n} from {len(ds)}")
    idx = np.random.default_rng(seed).permutation(len(ds))[:n]
    idx.sort()
    return ImageDataset(ds.images[idx], ds.labels[idx],
                        meta={"parent_n": len(ds), "subsample_seed": seed})


def load_by_name(name: str, options: dict | None = None, data_dir=None):
    """Resolve a config dataset reference to a (train, test) pair."""
    options = dict(options or {})
    if name == "cifar10":
        root = options.pop("dir", None) or data_dir or os.environ.get(DATA_DIR_ENV)
        if not root:
            raise DatasetError(f"cifar10 needs a directory: set {DATA_DIR_ENV} "
                               "or dataset_options.dir")
        if options:
            raise DatasetError(f"unknown cifar10 options {sorted(options)}")
        return load_cifar10(root)
    if name == "surrogate":
        n_train = int(options.pop("n_train", 20000))
        n_test = int(options.pop("n_test", 2000))
        seed = int(options.pop("seed", 0))
        return surrogate_pair(n_train, n_test, seed=seed, **options)
    if name == "synthetic":
        n_train = int(options.pop("n_train", 2000))
        n_test = int(options.pop("n_test", 500))
        seed = int(options.pop("seed", 0))
        full = make_synthetic(n_train + n_test, seed=seed, **options)
        train = ImageDataset(full.images[:n_train], full.labels[:n_train], dict(full.meta))
        test = ImageDataset(full.images[n_train:], full.labels[n_train:], dict(full.meta))
        return train, test
    raise DatasetError(f"unknown dataset {name!r}")


class BatchPlan:
    """Deterministic epoch iteration: every index exactly once per epoch.

    Augmentation ("pad-crop-flip": zero-pad 4, random crop, horizontal flip)
    draws from an rng derived from (seed, epoch), so an epoch is reproducible
    in isolation.
    """

    def __init__(self, n: int, batch_size: int, seed: int = 0, shuffle: bool = True,
                 augment: str = "none", drop_last: bool = False):
        if augment not in ("none", "pad-crop-flip"):
            raise DatasetError(f"unknown augmentation {augment!r}")
        if batch_size < 1:
            raise DatasetError("batch_size must be >= 1")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.augment = augment
        self.drop_last = drop_last

    def batches_per_epoch(self) -> int:
        if self.drop_last:
            return self.n // self.batch_size
        return (self.n + self.batch_size - 1) // self.batch_size

    def epoch_indices(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(self.n)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x5E9, epoch]))
        return rng.permutation(self.n)

    def iter_epoch(self, ds: ImageDataset, epoch: int):
        idx = self.epoch_indices(epoch)
        arng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xA19, epoch]))
        for start in range(0, self.n, self.batch_size):
            sel = idx[start:start + self.batch_size]
            if len(sel) < self.batch_size and self.drop_last:
                return
            x = ds.images[sel]
            if self.augment == "pad-crop-flip":
                x = _pad_crop_flip(x, arng)
            yield x, ds.labels[sel]


def _pad_crop_flip(x: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    b, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=b)
    ox = rng.integers(0, 2 * pad + 1, size=b)
    flip = rng.random(b) < 0.5
    out = np.empty_like(x)
    for i in range(b):
        crop = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out
