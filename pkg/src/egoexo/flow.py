"""Dense flow fields, geometric augmentation, and a small Lucas-Kanade estimator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

FLOW_MAGIC = b"XVMF"
FLOW_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

LK_EIGEN_THRESHOLD = 1e-4


class FlowFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement (pixels/frame); ``u`` and ``v`` are (height, width)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64)
        v = np.array(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u and v must be equal-shape 2-D arrays, got {u.shape} and {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("flow field contains non-finite values")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return np.array_equal(self.u, other.u) and np.array_equal(self.v, other.v)


@dataclass(frozen=True, eq=False)
class FlowClip:
    clip_id: str
    fields: tuple[FlowField, ...]

    def __post_init__(self):
        fields = tuple(self.fields)
        if not fields:
            raise ValueError(f"flow clip {self.clip_id!r} has no fields")
        shape = fields[0].u.shape
        if any(f.u.shape != shape for f in fields):
            raise ValueError(f"flow clip {self.clip_id!r} mixes field dimensions")
        object.__setattr__(self, "fields", fields)

    @classmethod
    def from_arrays(cls, clip_id: str, u, v) -> "FlowClip":
        """Build from (n_fields, height, width) stacks."""
        return cls(clip_id, tuple(FlowField(a, b) for a, b in zip(np.asarray(u), np.asarray(v))))

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([f.u for f in self.fields]), np.stack([f.v for f in self.fields]))

    def map(self, fn, clip_id: str | None = None) -> "FlowClip":
        return FlowClip(clip_id or self.clip_id, tuple(fn(f) for f in self.fields))

    def __len__(self):
        return len(self.fields)

    def __eq__(self, other):
        if not isinstance(other, FlowClip):
            return NotImplemented
        return self.clip_id == other.clip_id and self.fields == other.fields


def flip_horizontal(f: FlowField) -> FlowField:
    # mirrored grid, negated horizontal component
    return FlowField(-f.u[:, ::-1], f.v[:, ::-1])


def rotate_vectors(f: FlowField, phi: float) -> FlowField:
    """Rotate every flow vector by ``phi`` radians; pixel positions stay put.

    Only valid for position-free features such as orientation histograms.
    """
    c, s = np.cos(phi), np.sin(phi)
    return FlowField(f.u * c - f.v * s, f.u * s + f.v * c)


def flip_clip(clip: FlowClip, clip_id: str | None = None) -> FlowClip:
    return clip.map(flip_horizontal, clip_id)


def rotate_clip(clip: FlowClip, phi: float, clip_id: str | None = None) -> FlowClip:
    return clip.map(lambda f: rotate_vectors(f, phi), clip_id)


def lk_dense_flow(frame_a, frame_b, window: int = 5, threshold: float = LK_EIGEN_THRESHOLD) -> FlowField:
    """Single-scale dense Lucas-Kanade.

    Solves the 2x2 structure-tensor system summed over a ``window``-square
    neighbourhood at every pixel. Pixels whose smaller eigenvalue is below
    ``threshold`` get zero flow.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"frame dimension mismatch: {a.shape} vs {b.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")

    # Sobel /8 gives a unit-scaled derivative; averaging both frames centres it in time
    ix = 0.5 * (ndimage.sobel(a, axis=1) + ndimage.sobel(b, axis=1)) / 8.0
    iy = 0.5 * (ndimage.sobel(a, axis=0) + ndimage.sobel(b, axis=0)) / 8.0
    it = b - a

    def wsum(x):
        return ndimage.uniform_filter(x, size=window, mode="nearest") * window**2

    sxx, syy, sxy = wsum(ix * ix), wsum(iy * iy), wsum(ix * iy)
    sxt, syt = wsum(ix * it), wsum(iy * it)

    tr = sxx + syy
    det = sxx * syy - sxy * sxy
    lam_min = 0.5 * (tr - np.sqrt((sxx - syy) ** 2 + 4.0 * sxy**2))
    ok = lam_min >= threshold

    u = np.zeros_like(a)
    v = np.zeros_like(a)
    d = det[ok]
    u[ok] = (-syy[ok] * sxt[ok] + sxy[ok] * syt[ok]) / d
    v[ok] = (sxy[ok] * sxt[ok] - sxx[ok] * syt[ok]) / d
    return FlowField(u, v)


def write_flow_clip(path, clip: FlowClip) -> None:
    us, vs = clip.stacked()
    n, h, w = us.shape
    body = np.empty((n, h, w, 2), dtype="<f4")
    body[..., 0] = us
    body[..., 1] = vs
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FLOW_MAGIC, FLOW_VERSION, w, h, n))
        fh.write(body.tobytes(order="C"))


def read_flow_clip(path, clip_id: str | None = None) -> FlowClip:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FlowFormatError(f"{path}: truncated header")
    magic, version, w, h, n = _HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    if version != FLOW_VERSION:
        raise FlowFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + n * h * w * 2 * 4
    if len(raw) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, h, w, 2)
    body = body.astype(np.float64)
    return FlowClip.from_arrays(clip_id or path.stem, body[..., 0], body[..., 1])
