"""Image datasets: synthetic generator, MIMDS1 binary format, IDX import."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mimae.errors import ContractError, FormatError

MAGIC = b"MIMDS1"
_HEADER = struct.Struct("<6sIIIII")  # magic, count, H, W, C, label_count


@dataclass(eq=False)
class Dataset:
    """Images (n, C, H, W) float32 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    label_count: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ContractError(f"images must be (n, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ContractError("one label per image required")

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def order(self, seed: int, epoch: int = 0) -> np.ndarray:
        """Seeded permutation of the sample indices for ``epoch``."""
        return np.random.default_rng([seed, 7, epoch]).permutation(len(self))

    def batches(self, batch_size: int, seed: int, epoch: int = 0, drop_last: bool = True):
        """Yield index arrays covering a seeded shuffle of the dataset."""
        idx = self.order(seed, epoch)
        stop = len(idx) - len(idx) % batch_size if drop_last else len(idx)
        for start in range(0, stop, batch_size):
            yield idx[start:start + batch_size]

    def steps_per_epoch(self, batch_size: int) -> int:
        return len(self) // batch_size

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.label_count)

    def split(self, test_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Stratified train/test split."""
        rng = np.random.default_rng([seed, 11])
        train, test = [], []
        for c in np.unique(self.labels):
            idx = rng.permutation(np.flatnonzero(self.labels == c))
            n_test = int(round(len(idx) * test_fraction))
            test.append(idx[:n_test])
            train.append(idx[n_test:])
        return self.subset(np.sort(np.concatenate(train))), self.subset(np.sort(np.concatenate(test)))

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.label_count == other.label_count
                and np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 512
    image_size: int = 32
    channels: int = 1
    class_count: int = 4
    seed: int = 0
    noise: float = 0.05


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Oriented sinusoidal stripes under a soft blob, one class per (frequency, orientation) pair.

    Classes are balanced (counts differ by at most one). Each image gets a
    random phase, a randomly placed Gaussian blob and pixel noise; values
    are clipped to [0, 1].
    """
    if spec.class_count < 1 or spec.num_images < 1:
        raise ContractError("need at least one image and one class")
    rng = np.random.default_rng([spec.seed, 3])
    n, s, k = spec.num_images, spec.image_size, spec.class_count
    labels = np.arange(n) % k
    labels = labels[rng.permutation(n)].astype(np.int64)

    # class c: orientation evenly spread over [0, pi), frequency alternating low/high
    orient = np.pi * np.arange(k) / k
    freq = np.where(np.arange(k) % 2 == 0, 2.0, 3.5) / s

    yy, xx = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")
    theta = orient[labels] + rng.normal(0.0, 0.08, n)
    f = freq[labels] * rng.uniform(0.9, 1.1, n)
    phase = rng.uniform(0.0, 2 * np.pi, n)
    proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * f[:, None, None] * proj + phase[:, None, None])

    cx, cy = rng.uniform(0.2 * s, 0.8 * s, (2, n))
    width = rng.uniform(0.15 * s, 0.35 * s, n)
    blob = np.exp(-((xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2)
                  / (2 * width[:, None, None] ** 2))
    img = 0.25 + 0.75 * stripes * (0.4 + 0.6 * blob)
    img = img[:, None].repeat(spec.channels, axis=1)
    img = img + rng.normal(0.0, spec.noise, img.shape)
    images = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, k)


# ------------------------------------------------------------------ binary
def dataset_bytes(ds: Dataset) -> bytes:
    n, C, H, W = ds.images.shape
    if ds.label_count > 0xFFFF or (ds.labels < 0).any() or (ds.labels >= ds.label_count).any():
        raise ContractError("labels must lie in [0, label_count) and fit in u16")
    parts = [_HEADER.pack(MAGIC, n, H, W, C, ds.label_count)]
    pix = ds.images.astype("<f4").reshape(n, -1)
    lab = ds.labels.astype("<u2")
    for i in range(n):
        parts.append(pix[i].tobytes())
        parts.append(lab[i].tobytes())
    return b"".join(parts)


def write_dataset(path, ds: Dataset) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(dataset_bytes(ds))
    except OSError as exc:
        raise OSError(f"{path}: cannot write dataset: {exc.strerror or exc}") from exc
    return path


def parse_dataset(buf: bytes, path=None) -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", path, len(buf))
    magic, n, H, W, C, label_count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", path, 0)
    record = H * W * C * 4 + 2
    expected = _HEADER.size + n * record
    if len(buf) != expected:
        # locate the first incomplete record
        off = _HEADER.size + ((len(buf) - _HEADER.size) // record) * record if len(buf) < expected else expected
        kind = "truncated" if len(buf) < expected else "trailing bytes"
        raise FormatError(f"{kind}: file has {len(buf)} bytes, expected {expected}", path, off)
    dt = np.dtype([("pix", "<f4", (H * W * C,)), ("label", "<u2")])
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=_HEADER.size)
    images = rec["pix"].astype(np.float32).reshape(n, C, H, W)
    labels = rec["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= label_count)
    if bad.size:
        off = _HEADER.size + int(bad[0]) * record + record - 2
        raise FormatError(f"label {labels[bad[0]]} >= label_count {label_count}", path, off)
    return Dataset(images, labels, int(label_count))


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: cannot read dataset: {exc.strerror or exc}") from exc
    return parse_dataset(buf, path)


# --------------------------------------------------------------------- IDX
def _read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError("bad IDX magic", path, 0)
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code != 0x08:
        raise FormatError(f"unsupported IDX element type 0x{dtype_code:02x} (only unsigned byte)", path, 2)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX header", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) != header + size:
        raise FormatError(f"IDX payload has {len(raw) - header} bytes, expected {size}", path,
                          min(len(raw), header + size))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, label_count: int | None = None) -> Dataset:
    """Import an MNIST-style IDX image/label pair (pixels scaled to [0, 1])."""
    imgs = _read_idx(images_path)
    labels = _read_idx(labels_path).astype(np.int64)
    if imgs.ndim != 3 or labels.shape != (imgs.shape[0],):
        raise FormatError("IDX images must be (n, H, W) with one label each", images_path)
    k = int(labels.max()) + 1 if label_count is None else label_count
    return Dataset((imgs[:, None].astype(np.float32) / 255.0), labels, k)
