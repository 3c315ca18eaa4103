"""HOOF descriptors, PCA reduction and the on-disk feature store."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .flow import FlowClip

HOOF_BINS = 32
KIND_DIMS = {"hoof32": 32, "c3d4096": 4096, "c3d128": 128}

FEATURE_MAGIC = b"XVFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureFormatError(ValueError):
    pass


def hoof_from_vectors(u, v, bin_count: int = HOOF_BINS) -> np.ndarray:
    """Magnitude-weighted full-circle orientation histogram, L1-normalised.

    Angles are measured as atan2(v, u) in [0, 2*pi); bin ``b`` covers
    [b, b+1) * 2*pi / bin_count. No motion at all yields the uniform histogram.
    """
    if bin_count < 2:
        raise ValueError(f"bin_count must be >= 2, got {bin_count}")
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    theta = np.arctan2(v, u)
    theta = np.where(theta < 0.0, theta + 2.0 * np.pi, theta)
    idx = np.floor(theta * (bin_count / (2.0 * np.pi))).astype(np.int64)
    idx = np.clip(idx, 0, bin_count - 1)
    mag = np.hypot(u, v)
    hist = np.bincount(idx, weights=mag, minlength=bin_count)
    total = hist.sum()
    if total <= 0.0:
        return np.full(bin_count, 1.0 / bin_count)
    return hist / total


def hoof(clip: FlowClip, bin_count: int = HOOF_BINS) -> np.ndarray:
    """HOOF descriptor of a whole clip: magnitudes summed over every field,
    then normalised once."""
    if clip is None or len(clip) == 0:
        raise ValueError("cannot compute HOOF of an empty clip")
    u, v = clip.stacked()
    return hoof_from_vectors(u, v, bin_count)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Row-per-clip descriptor table, indexable by feature key."""

    kind: str
    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        ids = tuple(self.ids)
        if data.ndim != 2:
            raise ValueError("feature data must be 2-D")
        if self.kind not in KIND_DIMS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if data.shape[0] and data.shape[1] != KIND_DIMS[self.kind]:
            raise ValueError(f"{self.kind} rows must have dim {KIND_DIMS[self.kind]}, got {data.shape[1]}")
        if len(ids) != data.shape[0]:
            raise ValueError(f"{len(ids)} ids for {data.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate clip ids in feature matrix")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(ids)})

    @property
    def dim(self) -> int:
        return KIND_DIMS[self.kind]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self._index

    def __getitem__(self, key) -> np.ndarray:
        return self.data[self._index[key]]

    def subset(self, keys: Iterable[str]) -> "FeatureMatrix":
        keys = list(keys)
        rows = [self._index[k] for k in keys]
        return FeatureMatrix(self.kind, keys, self.data[rows].reshape(len(rows), self.dim))

    @classmethod
    def from_mapping(cls, kind: str, rows: Mapping[str, np.ndarray]) -> "FeatureMatrix":
        keys = sorted(rows)
        data = np.stack([rows[k] for k in keys]) if keys else np.zeros((0, KIND_DIMS[kind]))
        return cls(kind, keys, data)


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (out_dim, in_dim), rows orthonormal
    eigenvalues: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]

    @property
    def in_dim(self) -> int:
        return self.components.shape[1]

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, components=self.components, eigenvalues=self.eigenvalues)

    @classmethod
    def load(cls, path) -> "PcaModel":
        with np.load(path) as z:
            return cls(z["mean"], z["components"], z["eigenvalues"])


def _as_rows(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.data
    return np.asarray(x, dtype=np.float64)


def pca_fit(x, out_dim: int = 128) -> PcaModel:
    """Top-``out_dim`` principal axes of the sample covariance.

    Computed from the thin SVD of the centred data (same eigenvectors as the
    covariance, without forming a d x d matrix). Each component is signed so
    that its largest-magnitude entry is positive.
    """
    if isinstance(x, FeatureMatrix) and x.kind != "c3d4096":
        raise ValueError(f"PCA is fit on c3d4096 features, got {x.kind}")
    rows = _as_rows(x)
    n, d = rows.shape
    if n <= out_dim:
        raise ValueError(f"need more than {out_dim} rows to fit PCA, got {n}")
    if out_dim > d:
        raise ValueError(f"out_dim {out_dim} exceeds input dim {d}")
    if not np.isfinite(rows).all():
        raise ValueError("PCA input contains non-finite values")
    mean = rows.mean(axis=0)
    _, s, vt = np.linalg.svd(rows - mean, full_matrices=False)
    comps = vt[:out_dim].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(out_dim), pivot])
    comps *= signs[:, None]
    eig = np.maximum(s[:out_dim] ** 2 / (n - 1), 0.0)
    return PcaModel(mean=mean, components=comps, eigenvalues=eig)


def pca_apply(m: PcaModel, x):
    """Project rows onto the principal axes (centred, not whitened).

    A ``FeatureMatrix`` comes back as a ``c3d128`` matrix; arrays stay arrays.
    """
    rows = _as_rows(x)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.shape[1] != m.in_dim:
        raise ValueError(f"PCA expects dim {m.in_dim}, got {rows.shape[1]}")
    out = (rows - m.mean) @ m.components.T
    if isinstance(x, FeatureMatrix):
        return FeatureMatrix("c3d128", x.ids, out)
    return out


def pca_reconstruct(m: PcaModel, z) -> np.ndarray:
    return np.asarray(z) @ m.components + m.mean


def write_feature_matrix(path, fm: FeatureMatrix) -> None:
    """Binary table at ``path`` plus ``<path>.json`` mapping id -> row."""
    path = Path(path)
    rows, dim = fm.data.shape[0], fm.dim
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, dim))
        fh.write(np.ascontiguousarray(fm.data, dtype="<f4").tobytes())
    sidecar = {"kind": fm.kind, "rows": {k: i for i, k in enumerate(fm.ids)}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_feature_matrix(path) -> FeatureMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, rows, dim = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if len(raw) != _HEADER.size + rows * dim * 4:
        raise FeatureFormatError(f"{path}: size does not match {rows}x{dim} header")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, dim).astype(np.float64)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    ids = [None] * rows
    for key, i in sidecar["rows"].items():
        ids[i] = key
    if any(k is None for k in ids):
        raise FeatureFormatError(f"{path}: sidecar does not cover every row")
    return FeatureMatrix(sidecar["kind"], ids, data)


class FeatureStore:
    """Directory holding one table per (split, kind): ``<split>_<kind>.xvft``.

    Split may be ``"all"`` for tables that precede the train/val/test split.
    """

    def __init__(self, root):
        self.root = Path(root)

    def path(self, split: str, kind: str) -> Path:
        return self.root / f"{split}_{kind}.xvft"

    def save(self, split: str, fm: FeatureMatrix) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.path(split, fm.kind)
        write_feature_matrix(p, fm)
        return p

    def load(self, split: str, kind: str) -> FeatureMatrix:
        p = self.path(split, kind)
        if not p.exists():
            raise FileNotFoundError(f"no feature table {p}")
        return read_feature_matrix(p)

    def load_any(self, kind: str, split: str = "all") -> FeatureMatrix:
        """Table for ``split`` if present, otherwise the ``all`` table."""
        p = self.path(split, kind)
        return read_feature_matrix(p) if p.exists() else self.load("all", kind)
