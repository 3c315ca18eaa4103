"""Small fully connected networks in float64 numpy.

Dense -> optional BatchNorm -> activation blocks, hand-written backprop,
Adam, MSE / weighted BCE losses and a finite-difference gradient checker.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
BCE_CLAMP = 1e-7


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON

    @classmethod
    def init(cls, dim: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON) -> "BatchNorm":
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        if eps <= 0.0:
            raise ValueError("epsilon must be positive")
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim), momentum, eps)


@dataclass
class Block:
    W: np.ndarray  # (out, in)
    b: np.ndarray
    bn: BatchNorm | None = None
    activation: str = RELU

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def params(self) -> list[np.ndarray]:
        out = [self.W, self.b]
        if self.bn is not None:
            out += [self.bn.gamma, self.bn.beta]
        return out

    def param_names(self) -> list[str]:
        return ["W", "b", "gamma", "beta"][: len(self.params())]

    def linear(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W.T

    def post(self, a, train: bool, b=None, gamma=None, beta=None):
        """Everything after ``x @ W.T``: bias, batch norm, activation.

        Works on arrays with extra leading axes; batch statistics are always
        taken over axis -2. Overrides for b/gamma/beta must broadcast.
        """
        b = self.b if b is None else b
        cache = {}
        if self.bn is None:
            z = a + b
        else:
            bn = self.bn
            gamma = bn.gamma if gamma is None else gamma
            beta = bn.beta if beta is None else beta
            if train:
                # bias cancels under batch centring; leave it out so it is exactly inert
                mu = a.mean(axis=-2, keepdims=True)
                xc = a - mu
                var = (xc * xc).mean(axis=-2, keepdims=True)
                inv = 1.0 / np.sqrt(var + bn.eps)
                xhat = xc * inv
                cache.update(mu=mu, var=var, inv=inv, xhat=xhat)
            else:
                xhat = (a + b - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
            z = gamma * xhat + beta
        if self.activation == RELU:
            cache["mask"] = z > 0.0
            y = np.where(cache["mask"], z, 0.0)
        else:
            y = z
        return y, cache


@dataclass
class Activations:
    """Forward cache: per-block inputs and post-stage caches."""

    inputs: list[np.ndarray]
    caches: list[dict]
    output: np.ndarray
    train: bool


@dataclass
class Network:
    blocks: list[Block] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(f"block dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        for blk in self.blocks:
            if blk.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {blk.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.blocks[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].out_dim

    @property
    def has_batchnorm(self) -> bool:
        return any(b.bn is not None for b in self.blocks)

    def params(self) -> list[np.ndarray]:
        return [p for blk in self.blocks for p in blk.params()]

    def buffers(self) -> list[np.ndarray]:
        return [a for blk in self.blocks if blk.bn is not None
                for a in (blk.bn.running_mean, blk.bn.running_var)]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def architecture(self) -> list[dict]:
        return [
            {
                "in": blk.in_dim,
                "out": blk.out_dim,
                "batchnorm": blk.bn is not None,
                "activation": blk.activation,
                **({"momentum": blk.bn.momentum, "epsilon": blk.bn.eps} if blk.bn else {}),
            }
            for blk in self.blocks
        ]

    def forward(self, x, mode: str = "infer", update_stats: bool = True) -> Activations:
        return forward(self, x, mode, update_stats)

    def __call__(self, x) -> np.ndarray:
        return forward(self, x, "infer").output


def build_network(in_dim: int, layers: Sequence[tuple[int, bool, str]], rng: np.random.Generator,
                  momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON) -> Network:
    """``layers`` is a list of (out_dim, batchnorm?, activation).

    Glorot-uniform weights, zero biases, gamma 1 / beta 0.
    """
    blocks, d = [], in_dim
    for out, use_bn, act in layers:
        limit = np.sqrt(6.0 / (d + out))
        W = rng.uniform(-limit, limit, size=(out, d))
        bn = BatchNorm.init(out, momentum, eps) if use_bn else None
        blocks.append(Block(W, np.zeros(out), bn, act))
        d = out
    return Network(blocks)


def forward(net: Network, x, mode: str = "infer", update_stats: bool = True) -> Activations:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.in_dim:
        raise ValueError(f"expected input of shape (n, {net.in_dim}), got {h.shape}")
    train = mode == "train"
    if train and net.has_batchnorm and h.shape[0] < 2:
        raise ValueError("train-mode batch norm needs a batch of at least 2 rows")
    inputs, caches = [], []
    for blk in net.blocks:
        inputs.append(h)
        a = blk.linear(h)
        h, cache = blk.post(a, train)
        caches.append(cache)
        if train and update_stats and blk.bn is not None:
            bn = blk.bn
            batch_mean = cache["mu"][0] + blk.b
            bn.running_mean = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * batch_mean
            bn.running_var = bn.momentum * bn.running_var + (1.0 - bn.momentum) * cache["var"][0]
    return Activations(inputs, caches, h, train)


def backward(net: Network, acts: Activations | None, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients for ``net.params()`` order, plus d(loss)/d(input)."""
    if acts is None or not acts.caches:
        raise ValueError("backward needs the cache of a forward pass")
    if not acts.train:
        raise ValueError("backward needs a train-mode forward cache")
    grads: list[list[np.ndarray]] = []
    dy = np.asarray(grad_out, dtype=np.float64)
    for blk, x, cache in zip(reversed(net.blocks), reversed(acts.inputs), reversed(acts.caches)):
        dz = np.where(cache["mask"], dy, 0.0) if blk.activation == RELU else dy
        if blk.bn is None:
            da = dz
            g = [None, dz.sum(axis=0)]
        else:
            xhat, inv = cache["xhat"], cache["inv"]
            n = dz.shape[0]
            dgamma = (dz * xhat).sum(axis=0)
            dbeta = dz.sum(axis=0)
            dxhat = dz * blk.bn.gamma
            da = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            g = [None, np.zeros_like(blk.b), dgamma, dbeta]
        g[0] = da.T @ x
        dy = da @ blk.W
        grads.append(g)
    flat = [p for g in reversed(grads) for p in g]
    return flat, dy


# losses ---------------------------------------------------------------------

def mse_loss(pred, target):
    """Batch mean of squared Euclidean distance, and its gradient w.r.t. ``pred``.

    Leading axes beyond (batch, dim) are kept in the loss value.
    """
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    n = diff.shape[-2]
    loss = (diff * diff).sum(axis=-1).mean(axis=-1)
    return loss, 2.0 * diff / n


def weighted_bce_loss(probabilities, labels, weights):
    """sum(w * bce) / sum(w); gradient is w.r.t. the (unclamped) probabilities."""
    p_raw = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0.0:
        raise ValueError("sample weights must have a positive sum")
    p = np.clip(p_raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    loss = (w * per).sum(axis=-1) / wsum
    inside = (p_raw > BCE_CLAMP) & (p_raw < 1.0 - BCE_CLAMP)
    grad = np.where(inside, w * (p - y) / (p * (1.0 - p)) / wsum, 0.0)
    return loss, grad


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """In-place bias-corrected Adam update; returns (params, state)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# gradient checking ------------------------------------------------------------

def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


def numeric_gradients_naive(model, loss, sample, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences, one parameter entry at a time (slow reference)."""
    out = []
    for p in model.params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = model.loss_and_grads(sample, loss, update_stats=False, grads=False)
            flat[i] = old - h
            fm = model.loss_and_grads(sample, loss, update_stats=False, grads=False)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def _run_from(blocks: Sequence[Block], h):
    for blk in blocks:
        h, _ = blk.post(blk.linear(h), True)
    return h


def _perturbed_block_outputs(blk: Block, x, a, which: str, idx, delta):
    """Block outputs with one parameter entry shifted by ``delta`` per group.

    ``idx`` holds flat indices into the parameter; result is (G, n, out).
    """
    G = len(idx)
    if which == "W":
        i, j = np.unravel_index(idx, blk.W.shape)
        A = np.repeat(a[None], G, axis=0)
        A[np.arange(G), :, i] += delta * x[:, j].T
        return blk.post(A, True)[0]
    E = np.zeros((G, 1, blk.out_dim))
    E[np.arange(G), 0, idx] = delta
    base = {"b": blk.b, "gamma": blk.bn.gamma if blk.bn else None,
            "beta": blk.bn.beta if blk.bn else None}[which]
    return blk.post(a, True, **{which: base + E})[0]


def numeric_gradients(model, loss, sample, h: float = 1e-5, chunk: int = 512) -> list[np.ndarray]:
    """Central differences for every parameter entry, vectorised.

    Each entry is perturbed on its own, but many perturbations are pushed
    through the downstream layers at once as a leading group axis. Values
    are identical in definition to :func:`numeric_gradients_naive`.
    """
    xs = model.stream_inputs(sample)
    base = [net.forward(x, "train", update_stats=False) for net, x in zip(model.streams, xs)]
    outs = [b.output for b in base]
    result = []
    for s, net in enumerate(model.streams):
        for k, blk in enumerate(net.blocks):
            x = base[s].inputs[k]
            a = blk.linear(x)
            for which, p in zip(blk.param_names(), blk.params()):
                g = np.empty(p.size)
                for start in range(0, p.size, chunk):
                    idx = np.arange(start, min(start + chunk, p.size))
                    vals = []
                    for delta in (h, -h):
                        y = _perturbed_block_outputs(blk, x, a, which, idx, delta)
                        y = _run_from(net.blocks[k + 1:], y)
                        stream_outs = list(outs)
                        stream_outs[s] = y
                        vals.append(model.head_loss(stream_outs, sample, loss))
                    g[idx] = (vals[0] - vals[1]) / (2.0 * h)
                result.append(g.reshape(p.shape))
    return result


def tensor_relative_error(analytic, numeric) -> float:
    """||g_an - g_fd|| / max(||g_an||, ||g_fd||, 1e-12) over a whole parameter tensor."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


def gradient_check(model, loss, sample, h: float = 1e-5, per: str = "entry") -> float:
    """Max relative error of backprop against central differences.

    ``per="entry"`` takes |g_an - g_fd| / max(|g_an|, |g_fd|, 1e-12) for every
    scalar; ``per="tensor"`` uses the norm ratio per parameter tensor, which is
    insensitive to finite-difference rounding on near-zero entries.
    """
    if per not in ("entry", "tensor"):
        raise ValueError(f"per must be 'entry' or 'tensor', got {per!r}")
    _, analytic = model.loss_and_grads(sample, loss, update_stats=False)
    numeric = numeric_gradients(model, loss, sample, h)
    if per == "tensor":
        return max(tensor_relative_error(a, n) for a, n in zip(analytic, numeric))
    return max(float(relative_error(a, n).max()) for a, n in zip(analytic, numeric))


class NetworkObjective:
    """Adapter giving a single :class:`Network` the gradient-check interface.

    ``sample`` is (inputs, targets); ``loss(pred, target) -> (value, grad)``.
    """

    def __init__(self, net: Network):
        self.net = net

    @property
    def streams(self):
        return [self.net]

    def params(self):
        return self.net.params()

    def stream_inputs(self, sample):
        return [sample[0]]

    def head_loss(self, outs, sample, loss):
        return loss(outs[0], sample[1])[0]

    def loss_and_grads(self, sample, loss, update_stats=True, grads=True):
        x, y = sample
        acts = self.net.forward(x, "train", update_stats=update_stats)
        value, dout = loss(acts.output, y)
        if not grads:
            return float(value)
        return float(value), backward(self.net, acts, dout)[0]
