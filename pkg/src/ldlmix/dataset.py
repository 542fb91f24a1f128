"""Label-distribution datasets: file I/O, synthesis, scaling, folds, noise."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError, ParseError

LABEL_SUM_TOL = 1e-4
# below this deviation a label row is left bit-for-bit as read
_RENORM_FLOOR = 1e-12


@dataclass
class LdlDataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DimensionError("features and labels must both be 2-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} label rows")
        if min(self.features.shape) < 1 or self.labels.shape[1] < 1:
            raise DimensionError("dataset must have at least one row, feature and label")
        if not (np.isfinite(self.features).all() and np.isfinite(self.labels).all()):
            raise ParseError("dataset contains NaN or Inf")

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1]

    @property
    def c(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "LdlDataset":
        return LdlDataset(self.name, self.features[idx], self.labels[idx], dict(self.meta))


# ---------------------------------------------------------------------------
# canonical text format
# ---------------------------------------------------------------------------

def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.split(" ")
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise ParseError(f"header must be 'm n c', got {line!r}", 1)
    m, n, c = (int(p) for p in parts)
    if min(m, n, c) < 1:
        raise ParseError("header extents must be positive", 1)
    return m, n, c


def parse_ldl_file(path) -> LdlDataset:
    path = Path(path)
    text = path.read_text(encoding="ascii")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", 1)
    m, n, c = _parse_header(lines[0].rstrip("\r"))
    if len(lines) - 1 != m:
        raise ParseError(f"header announces {m} rows, file has {len(lines) - 1}", len(lines))
    data = np.empty((m, n + c))
    for i in range(m):
        lineno = i + 2
        tokens = lines[i + 1].split()
        if len(tokens) != n + c:
            raise ParseError(f"expected {n + c} values, found {len(tokens)}", lineno)
        try:
            data[i] = [float(t) for t in tokens]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not np.isfinite(data[i]).all():
            raise ParseError("non-finite value", lineno)
        lab = data[i, n:]
        if (lab < 0).any():
            raise ParseError("negative label value", lineno)
        dev = abs(lab.sum() - 1.0)
        if dev > LABEL_SUM_TOL:
            raise ParseError(f"label row sums to {lab.sum():.6g}", lineno)
        if dev > _RENORM_FLOOR:
            data[i, n:] = lab / lab.sum()
    return LdlDataset(path.stem, data[:, :n], data[:, n:])


def _fmt(x: float) -> str:
    return np.format_float_positional(x, unique=True, trim="-")


def format_ldl(ds: LdlDataset) -> str:
    out = [f"{ds.m} {ds.n} {ds.c}"]
    for f_row, l_row in zip(ds.features, ds.labels):
        out.append(" ".join(_fmt(v) for v in np.concatenate([f_row, l_row])))
    return "\n".join(out) + "\n"


def write_ldl_file(ds: LdlDataset, path) -> None:
    Path(path).write_bytes(format_ldl(ds).encode("ascii"))


def read_matrix(path) -> np.ndarray:
    """Whitespace or comma separated numeric matrix (prediction files)."""
    text = Path(path).read_text().replace(",", " ")
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ParseError("rows of unequal length in matrix file")
    try:
        return np.array([[float(t) for t in r] for r in rows])
    except ValueError as exc:
        raise ParseError(str(exc)) from None


# ---------------------------------------------------------------------------
# IDX (MNIST) binaries
# ---------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise ParseError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise ParseError(f"{path}: truncated IDX payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx_images(path) -> np.ndarray:
    """Images as float64 in [0, 1], shape [m, rows, cols]."""
    return _read_idx(path, IDX_IMAGES, 3).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS, 1).astype(np.int64)


def write_idx_images(images: np.ndarray, path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    m, r, c = images.shape
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES, m, r, c) + images.tobytes())


def write_idx_labels(labels, path) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS, labels.size) + labels.tobytes())


# ---------------------------------------------------------------------------
# scaling, folds, noise
# ---------------------------------------------------------------------------

def zscore_fit_transform(train, apply_to):
    """Standardise ``apply_to`` with the column statistics of ``train``.

    Population std; columns with std below 1e-12 are only centred.
    Returns ``(scaled, mean, std)``.
    """
    train = np.asarray(train, dtype=np.float64)
    apply_to = np.asarray(apply_to, dtype=np.float64)
    if train.shape[0] == 0:
        raise ConfigurationError("cannot fit z-score statistics on an empty matrix")
    if train.shape[1] != apply_to.shape[1]:
        raise DimensionError(f"column count mismatch: {train.shape[1]} vs {apply_to.shape[1]}")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return (apply_to - mean) / std, mean, std


@dataclass
class FoldPlan:
    k: int
    repeats: int
    seed: int
    assignments: list[list[np.ndarray]]

    def splits(self):
        """Yield ``(repeat, fold, train_idx, test_idx)`` repeat-major."""
        for r, folds in enumerate(self.assignments):
            for f, test in enumerate(folds):
                train = np.concatenate([folds[j] for j in range(self.k) if j != f])
                yield r, f, np.sort(train), np.sort(test)


def kfold_split(m: int, k: int, repeats: int = 1, seed: int = 1024) -> FoldPlan:
    if k < 2:
        raise ConfigurationError(f"k-fold needs k >= 2, got {k}")
    if m < k:
        raise ConfigurationError(f"cannot split {m} rows into {k} folds")
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    assignments = []
    for r in range(repeats):
        perm = np.random.default_rng([seed, r]).permutation(m)
        # array_split hands the remainder to the first folds
        assignments.append(np.array_split(perm, k))
    return FoldPlan(k, repeats, seed, assignments)


def inject_feature_noise(x, sigma: float, seed: int) -> np.ndarray:
    """Add seeded N(0, sigma^2) noise to every feature value."""
    if sigma < 0:
        raise ConfigurationError("noise sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * np.random.default_rng(seed).standard_normal(x.shape)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PcaBasis:
    mean: np.ndarray          # [d]
    components: np.ndarray    # [d, k], orthonormal columns
    eigenvalues: np.ndarray   # [d], all of them, descending

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components

    def inverse_transform(self, z) -> np.ndarray:
        return np.asarray(z) @ self.components.T + self.mean


def pca_fit(x, k: int) -> PcaBasis:
    x = np.asarray(x, dtype=np.float64)
    m, d = x.shape
    if k > d or k < 1:
        raise ConfigurationError(f"cannot keep {k} components of {d}-dimensional data")
    if m < 2:
        raise ConfigurationError("PCA needs at least two rows")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / m
    cov = 0.5 * (cov + cov.T)
    evals, evecs = kernels.jacobi_eigh(np.ascontiguousarray(cov))
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    comps = evecs[:, :k].copy()
    for j in range(k):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaBasis(mean, comps, evals)


def pca_project(x, k: int) -> tuple[np.ndarray, PcaBasis]:
    basis = pca_fit(x, k)
    return basis.transform(x), basis


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

def gaussian_label_distribution(class_id: int, c: int, sigma: float = 0.5) -> np.ndarray:
    """Gaussian centred at ``class_id`` sampled on ``c`` points spanning [0, 9].

    Entries stay strictly positive in float64 while ``9 / sigma`` is below ~38.
    """
    if c < 2:
        raise ConfigurationError("label grid needs c >= 2")
    if sigma <= 0:
        raise ConfigurationError("label sigma must be positive")
    grid = 9.0 * np.arange(c) / (c - 1)
    z = (grid - class_id) / sigma
    # work in log space so far-off grid points stay strictly positive
    logd = -0.5 * z * z
    d = np.exp(logd - logd.max())
    return d / d.sum()


def build_synthetic(images, classes, c: int = 56, sigma: float = 0.5,
                    components: int = 28, name: str = "synthetic") -> LdlDataset:
    images = np.asarray(images, dtype=np.float64)
    classes = np.asarray(classes)
    if images.shape[0] != classes.shape[0]:
        raise DimensionError(f"{images.shape[0]} images vs {classes.shape[0]} class labels")
    flat = images.reshape(images.shape[0], -1)
    feats, basis = pca_project(flat, components)
    labels = np.stack([gaussian_label_distribution(int(k), c, sigma) for k in classes])
    return LdlDataset(name, feats, labels,
                      meta={"classes": classes.astype(np.int64), "pca": basis})
