"""Deterministic classification datasets: a synthetic task family and IDX files."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np


class DataSpecError(ValueError):
    pass


class IDXFormatError(ValueError):
    pass


class IDXConsistencyError(IDXFormatError):
    pass


class IDXLengthError(IDXFormatError):
    pass


@dataclass(frozen=True)
class Transform:
    """Task transform: rotate images by ``quarter_turns`` x 90 degrees, then
    relabel class ``c`` as ``permutation[c]``."""

    quarter_turns: int = 0
    permutation: tuple | None = None

    @property
    def kind(self) -> str:
        if self.permutation is None and self.quarter_turns % 4 == 0:
            return "none"
        if self.permutation is None:
            return "rotation"
        if self.quarter_turns % 4 == 0:
            return "label-permutation"
        return "rotation+label-permutation"

    def key(self, classes: int) -> tuple:
        perm = tuple(range(classes)) if self.permutation is None else tuple(self.permutation)
        return (self.quarter_turns % 4, perm)

    def to_dict(self) -> dict:
        return {"quarter_turns": self.quarter_turns,
                "permutation": None if self.permutation is None else list(self.permutation)}

    @classmethod
    def from_dict(cls, d: dict | None) -> "Transform":
        if not d:
            return cls()
        perm = d.get("permutation")
        return cls(int(d.get("quarter_turns", 0)), None if perm is None else tuple(int(p) for p in perm))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Gaussian class mixture rendered as small single- or multi-channel images.

    Class means are smooth random blob images drawn from ``mixture_seed`` (or
    given explicitly in ``means``); samples add isotropic noise ``sigma``.
    When ``image_side`` is 0 the data are flat feature vectors of size
    ``features``.
    """

    classes: int = 8
    image_side: int = 16
    channels: int = 1
    features: int = 0
    n_train: int = 4000
    n_test: int = 1000
    sigma: float = 1.0
    mean_scale: float = 1.0
    blobs: int = 3
    mixture_seed: int = 0
    seed: int = 0
    transform: Transform = field(default_factory=Transform)
    means: tuple | None = None

    @property
    def input_shape(self) -> tuple:
        if self.image_side:
            return (self.channels, self.image_side, self.image_side)
        return (self.features,)

    def validate(self) -> None:
        problems = []
        if self.classes < 2:
            problems.append("classes must be >= 2")
        if self.image_side < 0 or (self.image_side == 0 and self.features < 1):
            problems.append("need image_side >= 1 or features >= 1")
        if self.channels < 1:
            problems.append("channels must be >= 1")
        if min(self.n_train, self.n_test) < self.classes:
            problems.append(f"n_train and n_test must be >= classes ({self.classes})")
        if self.sigma < 0:
            problems.append("sigma must be >= 0")
        perm = self.transform.permutation
        if perm is not None and sorted(perm) != list(range(self.classes)):
            problems.append(f"permutation {perm} is not a permutation of range({self.classes})")
        if self.transform.quarter_turns % 4 and not self.image_side:
            problems.append("rotation requires image data")
        if problems:
            raise DataSpecError("invalid SyntheticTaskSpec: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["transform"] = self.transform.to_dict()
        if self.means is not None:
            d["means"] = np.asarray(self.means).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataSpecError(f"unknown synthetic data keys: {sorted(unknown)}")
        d = dict(d)
        d["transform"] = Transform.from_dict(d.get("transform"))
        if d.get("means") is not None:
            d["means"] = tuple(tuple(np.asarray(m, dtype=float).reshape(-1)) for m in d["means"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class DatasetHandle:
    x: np.ndarray
    y: np.ndarray
    classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise IDXConsistencyError(f"{len(self.x)} inputs vs {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise DataSpecError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.x[idx], self.y[idx], self.classes, self.split, self.provenance)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y.astype("<i8")).tobytes())
        return h.hexdigest()


def class_means(spec: SyntheticTaskSpec) -> np.ndarray:
    """Per-class mean inputs, shape (classes, *input_shape), before transforms."""
    shape = spec.input_shape
    if spec.means is not None:
        means = np.asarray(spec.means, dtype=np.float64).reshape((spec.classes,) + shape)
    else:
        rng = np.random.default_rng(spec.mixture_seed)
        if spec.image_side:
            side = spec.image_side
            yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
            means = np.zeros((spec.classes,) + shape)
            for c in range(spec.classes):
                for ch in range(spec.channels):
                    for _ in range(spec.blobs):
                        cy, cx = rng.uniform(0, 1, 2)
                        width = rng.uniform(0.08, 0.25)
                        sign = rng.choice([-1.0, 1.0])
                        means[c, ch] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        else:
            means = rng.standard_normal((spec.classes,) + shape)
        norms = np.sqrt((means.reshape(spec.classes, -1) ** 2).sum(axis=1))
        means = means / np.maximum(norms, 1e-12).reshape((-1,) + (1,) * len(shape))
        means = means * np.sqrt(np.prod(shape)) / 4
    means = means * spec.mean_scale
    flat = means.reshape(spec.classes, -1)
    for a, b in itertools.combinations(range(spec.classes), 2):
        if np.array_equal(flat[a], flat[b]):
            raise DataSpecError(f"degenerate mixture: classes {a} and {b} share a mean")
    return means


def _split_counts(n: int, classes: int) -> np.ndarray:
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    return counts


def _draw(spec: SyntheticTaskSpec, means: np.ndarray, n: int, rng: np.random.Generator):
    counts = _split_counts(n, spec.classes)
    y = np.repeat(np.arange(spec.classes), counts)
    y = y[rng.permutation(n)]
    noise = rng.standard_normal((n,) + means.shape[1:])
    x = means[y] + spec.sigma * noise
    return x, y


def _apply_transform(x: np.ndarray, y: np.ndarray, t: Transform):
    if t.quarter_turns % 4:
        x = np.rot90(x, k=t.quarter_turns % 4, axes=(-2, -1))
    if t.permutation is not None:
        y = np.asarray(t.permutation)[y]
    return np.ascontiguousarray(x), y


def gen_synthetic(spec: SyntheticTaskSpec) -> tuple[DatasetHandle, DatasetHandle]:
    """Generate (train, test) splits; same spec gives bit-identical arrays."""
    spec.validate()
    means = class_means(spec)
    rng = np.random.default_rng(spec.seed)
    out = []
    digest = spec.digest()
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        x, y = _draw(spec, means, n, rng)
        x, y = _apply_transform(x, y, spec.transform)
        out.append(DatasetHandle(x.astype(np.float32), y.astype(np.int64), spec.classes, split, digest))
    return out[0], out[1]


def _derive_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i, 0x5EED]).generate_state(1, dtype=np.uint32)[0])


def make_task_family(base: SyntheticTaskSpec, n: int) -> list[SyntheticTaskSpec]:
    """``n`` tasks sharing the base mixture.

    Member 0 keeps the base transform; member ``i`` rotates by ``i mod 4``
    quarter turns (image data) and, from the fourth member on, also applies a
    seeded label permutation.  Every member gets a derived sample seed.
    """
    if n < 2:
        raise DataSpecError("task family needs n >= 2")
    base.validate()
    rotations = 4 if base.image_side else 1
    limit = rotations * np.prod(range(1, base.classes + 1), dtype=float)
    if n > limit:
        raise DataSpecError(f"only {int(limit)} distinct transforms available, asked for {n}")
    specs, seen = [], set()
    rng = np.random.default_rng(_derive_seed(base.seed, 10_000))
    for i in range(n):
        if i == 0:
            t = base.transform
        else:
            turns = (base.transform.quarter_turns + i) % rotations if rotations > 1 else 0
            perm = None
            if i >= rotations:
                perm = tuple(int(p) for p in rng.permutation(base.classes))
            t = Transform(turns, perm)
            while t.key(base.classes) in seen:
                t = Transform(turns, tuple(int(p) for p in rng.permutation(base.classes)))
        seen.add(t.key(base.classes))
        specs.append(dataclasses.replace(base, seed=_derive_seed(base.seed, i), transform=t))
    return specs


# -- IDX ---------------------------------------------------------------------

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.str[1:]: k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (big-endian header: 0, 0, type code, ndim; dims as u32)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXLengthError(f"{path}: {len(raw)} bytes, shorter than the 4-byte magic")
    zero, code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or code not in _IDX_TYPES or ndim < 1:
        raise IDXFormatError(f"{path}: bad magic bytes {raw[:4].hex(' ')}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IDXLengthError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dt = _IDX_TYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) - head != need:
        raise IDXLengthError(f"{path}: payload has {len(raw) - head} bytes, header implies {need}")
    return np.frombuffer(raw, dtype=dt, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    code = _IDX_CODES.get(a.dtype.newbyteorder(">").str[1:])
    if code is None:
        raise IDXFormatError(f"dtype {a.dtype} has no IDX type code")
    header = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.astype(a.dtype.newbyteorder(">")).tobytes())


def load_idx(images_path, labels_path, classes: int | None = None, split: str = "train") -> DatasetHandle:
    """Load an IDX image/label pair.  Unsigned-byte pixels are scaled to [0, 1];
    float payloads are kept as-is."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim < 2:
        raise IDXFormatError(f"{images_path}: images need >= 2 dims, got {images.ndim}")
    if labels.ndim != 1:
        raise IDXFormatError(f"{labels_path}: labels must be 1-D, got {labels.ndim} dims")
    if images.shape[0] != labels.shape[0]:
        raise IDXConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.dtype == np.dtype(">u1"):
        x = images.astype(np.float32) / np.float32(255.0)
    else:
        x = images.astype(np.float32)
    if x.ndim == 3:
        x = x[:, None]
    y = labels.astype(np.int64)
    k = int(y.max()) + 1 if classes is None else classes
    h = hashlib.sha256(Path(images_path).read_bytes() + Path(labels_path).read_bytes()).hexdigest()[:16]
    return DatasetHandle(np.ascontiguousarray(x), y, k, split, h)


def save_dataset_idx(dataset: DatasetHandle, images_path, labels_path) -> None:
    x = dataset.x
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    write_idx(images_path, x.astype(np.float32))
    write_idx(labels_path, dataset.y.astype(np.uint8))


def batch_iter(dataset: DatasetHandle, batch_size: int, shuffle_seed: int | None = 0) -> Iterator[tuple]:
    """One epoch of (x, y) batches in a seeded order; the last short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise DataSpecError("cannot iterate an empty dataset")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.x[idx], dataset.y[idx]


def epoch_seed(seed: int, epoch: int) -> int:
    return _derive_seed(seed, epoch)
