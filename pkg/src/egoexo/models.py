"""Mapping models (source feature -> target space) and the two-stream scorer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import nn
from .nn import Network

MODEL_FORMAT_VERSION = 1

DIRECTIONS = {
    "ego2side": ("ego", "side"),
    "side2ego": ("side", "ego"),
    "ego2top": ("ego", "top"),
    "top2ego": ("top", "ego"),
}

RECONSTRUCTION_DIMS = {"hoof32": [32, 64, 128, 64, 32], "c3d128": [128, 256, 256, 128, 128]}
TWO_STREAM_DIMS = {"hoof32": [64, 128], "c3d128": [128, 256]}
FEATURE_DIMS = {"hoof32": 32, "c3d128": 128}

RIDGE_GRID = tuple(10.0**k for k in range(-3, 4))


class RankDeficientError(np.linalg.LinAlgError):
    pass


def _check_dim(X, dim: int, what: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"{what} expects rows of dim {dim}, got shape {X.shape}")
    return X


# mappers ----------------------------------------------------------------------

@dataclass
class DirectMapper:
    """Identity mapping: compare raw source features with target features."""

    dim: int
    direction: str = ""
    kind: str = ""
    info: dict = field(default_factory=dict)
    variant = "direct"

    @property
    def source_dim(self) -> int:
        return self.dim

    @property
    def target_dim(self) -> int:
        return self.dim

    def map(self, X) -> np.ndarray:
        return _check_dim(X, self.dim, "direct mapper").copy()


@dataclass
class LinearMapper:
    """``y = W x`` (``W`` is target_dim x source_dim, one extra column if ``fit_intercept``)."""

    W: np.ndarray
    lam: float | None = None
    fit_intercept: bool = False
    direction: str = ""
    kind: str = ""
    info: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return "linear" if self.lam is None else "ridge"

    @property
    def source_dim(self) -> int:
        return self.W.shape[1] - int(self.fit_intercept)

    @property
    def target_dim(self) -> int:
        return self.W.shape[0]

    def map(self, X) -> np.ndarray:
        X = _check_dim(X, self.source_dim, "linear mapper")
        if self.fit_intercept:
            return X @ self.W[:, :-1].T + self.W[:, -1]
        return X @ self.W.T


@dataclass
class NetMapper:
    net: Network
    direction: str = ""
    kind: str = ""
    info: dict = field(default_factory=dict)
    variant = "reconstruction_net"

    @property
    def source_dim(self) -> int:
        return self.net.in_dim

    @property
    def target_dim(self) -> int:
        return self.net.out_dim

    def map(self, X) -> np.ndarray:
        X = _check_dim(X, self.source_dim, "reconstruction net")
        return nn.forward(self.net, X, "infer").output


def map_features(m, X) -> np.ndarray:
    return m.map(X)


def _design(X, fit_intercept: bool) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([X, np.ones((X.shape[0], 1))]) if fit_intercept else X


def fit_ols(X, Y, fit_intercept: bool = False, **kw) -> LinearMapper:
    """Least-squares ``W`` via a QR factorisation of the design matrix.

    Refuses rank-deficient input instead of silently pseudo-inverting.
    """
    D = _design(X, fit_intercept)
    Y = np.asarray(Y, dtype=np.float64)
    if not np.isfinite(D).all():
        raise ValueError("OLS input contains non-finite values")
    n, d = D.shape
    if n < d or np.linalg.matrix_rank(D) < d:
        raise RankDeficientError(
            f"design matrix ({n}x{d}) is rank deficient; use fit_ridge with lambda > 0"
        )
    Q, R = np.linalg.qr(D)
    Wt = scipy.linalg.solve_triangular(R, Q.T @ Y)
    return LinearMapper(Wt.T.copy(), None, fit_intercept, **kw)


def fit_ridge(X, Y, lam: float = 1.0, fit_intercept: bool = False, **kw) -> LinearMapper:
    """argmin sum ||W x - y||^2 + lam ||W||_F^2 via the (X'X + lam I) system.

    With an intercept, the intercept column is not penalised.
    """
    if lam < 0:
        raise ValueError(f"ridge lambda must be >= 0, got {lam}")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if not np.isfinite(X).all():
        raise ValueError("ridge input contains non-finite values")
    if fit_intercept:
        xm, ym = X.mean(axis=0), Y.mean(axis=0)
        X, Y = X - xm, Y - ym
    A = X.T @ X + lam * np.eye(X.shape[1])
    try:
        Wt = scipy.linalg.solve(A, X.T @ Y, assume_a="pos")
    except np.linalg.LinAlgError:
        raise RankDeficientError("X'X is singular; use lambda > 0") from None
    W = Wt.T
    if fit_intercept:
        W = np.hstack([W, (ym - W @ xm)[:, None]])
    return LinearMapper(W.copy(), float(lam), fit_intercept, **kw)


def select_ridge_lambda(Xtr, Ytr, Xval, Yval, grid=RIDGE_GRID, fit_intercept=False) -> tuple[float, list]:
    """Grid value with the lowest validation MSE (first one on ties)."""
    scores = []
    for lam in grid:
        m = fit_ridge(Xtr, Ytr, lam, fit_intercept)
        scores.append(float(nn.mse_loss(m.map(Xval), Yval)[0]))
    best = int(np.argmin(scores))
    return float(grid[best]), scores


def build_reconstruction_net(kind: str, rng: np.random.Generator, **bn) -> Network:
    """Four Dense+BN+ReLU hidden blocks and a linear output block."""
    dims = RECONSTRUCTION_DIMS[kind]
    layers = [(d, True, nn.RELU) for d in dims[:-1]] + [(dims[-1], False, nn.IDENTITY)]
    return nn.build_network(FEATURE_DIMS[kind], layers, rng, **bn)


# two-stream scorer -------------------------------------------------------------

@dataclass
class TwoStreamScorer:
    """sigmoid(<f_src(x_src), f_tgt(x_tgt)>) with unshared stream weights."""

    source: Network
    target: Network
    direction: str = ""
    kind: str = ""
    info: dict = field(default_factory=dict)
    variant = "two_stream"

    def __post_init__(self):
        if self.source.out_dim != self.target.out_dim:
            raise ValueError("stream output dims differ")

    @property
    def streams(self) -> list[Network]:
        return [self.source, self.target]

    def params(self) -> list[np.ndarray]:
        return self.source.params() + self.target.params()

    def copy(self) -> "TwoStreamScorer":
        return TwoStreamScorer(self.source.copy(), self.target.copy(), self.direction,
                               self.kind, dict(self.info))

    def stream_inputs(self, sample):
        return [sample[0], sample[1]]

    def head_loss(self, outs, sample, loss):
        logits = (outs[0] * outs[1]).sum(axis=-1)
        return loss(nn.sigmoid(logits), sample[2], sample[3])[0]

    def loss_and_grads(self, sample, loss=nn.weighted_bce_loss, update_stats=True, grads=True):
        """``sample`` = (x_src, x_tgt, labels, weights)."""
        xs, xt, y, w = sample
        acts_s = self.source.forward(xs, "train", update_stats)
        acts_t = self.target.forward(xt, "train", update_stats)
        os_, ot = acts_s.output, acts_t.output
        p = nn.sigmoid((os_ * ot).sum(axis=1))
        value, dp = loss(p, y, w)
        if not grads:
            return float(value)
        dlogit = (dp * p * (1.0 - p))[:, None]
        gs, _ = nn.backward(self.source, acts_s, dlogit * ot)
        gt, _ = nn.backward(self.target, acts_t, dlogit * os_)
        return float(value), gs + gt

    def embed(self, xs=None, xt=None):
        es = None if xs is None else self.source(_check_dim(xs, self.source.in_dim, "source stream"))
        et = None if xt is None else self.target(_check_dim(xt, self.target.in_dim, "target stream"))
        return es, et

    def logits(self, xs, xt) -> np.ndarray:
        es, et = self.embed(xs, xt)
        if es.shape[0] != et.shape[0]:
            raise ValueError("source and target batches differ in length")
        return (es * et).sum(axis=1)

    def logit_matrix(self, queries, gallery) -> np.ndarray:
        es, et = self.embed(queries, gallery)
        return es @ et.T

    def score(self, xs, xt) -> np.ndarray:
        return nn.sigmoid(self.logits(xs, xt))


def score_pair(s: TwoStreamScorer, x_src, x_tgt):
    """Match probability; vectors give a float, row batches give an array."""
    single = np.ndim(x_src) == 1 and np.ndim(x_tgt) == 1
    p = s.score(x_src, x_tgt)
    return float(p[0]) if single else p


def build_two_stream(kind: str, rng: np.random.Generator, **bn) -> TwoStreamScorer:
    dims = TWO_STREAM_DIMS[kind]
    layers = [(d, True, nn.RELU) for d in dims]
    src = nn.build_network(FEATURE_DIMS[kind], layers, rng, **bn)
    tgt = nn.build_network(FEATURE_DIMS[kind], layers, rng, **bn)
    return TwoStreamScorer(src, tgt, kind=kind)


# persistence -------------------------------------------------------------------

def _net_arrays(net: Network, prefix: str):
    out = []
    for i, blk in enumerate(net.blocks):
        for name, p in zip(blk.param_names(), blk.params()):
            out.append((f"{prefix}block{i}.{name}", p))
    for i, blk in enumerate(net.blocks):
        if blk.bn is not None:
            out.append((f"{prefix}block{i}.running_mean", blk.bn.running_mean))
            out.append((f"{prefix}block{i}.running_var", blk.bn.running_var))
    return out


def _net_from_arrays(arch: list[dict], arrays: dict, prefix: str) -> Network:
    blocks = []
    for i, spec in enumerate(arch):
        key = f"{prefix}block{i}."
        bn = None
        if spec["batchnorm"]:
            bn = nn.BatchNorm(arrays[key + "gamma"], arrays[key + "beta"],
                              arrays[key + "running_mean"], arrays[key + "running_var"],
                              spec["momentum"], spec["epsilon"])
        blocks.append(nn.Block(arrays[key + "W"], arrays[key + "b"], bn, spec["activation"]))
    return Network(blocks)


def save_model(m, path) -> None:
    """Directory with ``meta.json`` and ``weights.bin`` (float32, little-endian,
    arrays concatenated in the order listed under ``layout``)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "variant": m.variant,
        "direction": m.direction,
        "feature_kind": m.kind,
        "info": m.info,
    }
    if isinstance(m, DirectMapper):
        meta["dim"] = m.dim
        arrays = []
    elif isinstance(m, LinearMapper):
        meta.update(lam=m.lam, fit_intercept=m.fit_intercept)
        arrays = [("W", m.W)]
    elif isinstance(m, NetMapper):
        meta["architecture"] = m.net.architecture()
        arrays = _net_arrays(m.net, "")
    elif isinstance(m, TwoStreamScorer):
        meta["architecture"] = {"source": m.source.architecture(), "target": m.target.architecture()}
        arrays = _net_arrays(m.source, "source.") + _net_arrays(m.target, "target.")
    else:
        raise TypeError(f"cannot save {type(m).__name__}")
    meta["layout"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    (path / "weights.bin").write_bytes(blob)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path):
    path = Path(path)
    meta_path, weights_path = path / "meta.json", path / "weights.bin"
    for p in (meta_path, weights_path):
        if not p.exists():
            raise FileNotFoundError(f"model file missing: {p}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format {meta.get('format_version')}")
    flat = np.frombuffer(weights_path.read_bytes(), dtype="<f4").astype(np.float64)
    arrays, offset = {}, 0
    for entry in meta["layout"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = flat[offset:offset + size].reshape(entry["shape"]).copy()
        offset += size
    if offset != flat.size:
        raise ValueError(f"{weights_path}: {flat.size} values, layout needs {offset}")
    common = dict(direction=meta["direction"], kind=meta["feature_kind"], info=meta.get("info", {}))
    variant = meta["variant"]
    if variant == "direct":
        return DirectMapper(meta["dim"], **common)
    if variant in ("linear", "ridge"):
        return LinearMapper(arrays["W"], meta["lam"], meta["fit_intercept"], **common)
    if variant == "reconstruction_net":
        return NetMapper(_net_from_arrays(meta["architecture"], arrays, ""), **common)
    if variant == "two_stream":
        arch = meta["architecture"]
        return TwoStreamScorer(_net_from_arrays(arch["source"], arrays, "source."),
                               _net_from_arrays(arch["target"], arrays, "target."), **common)
    raise ValueError(f"unknown model variant {variant!r}")
