"""Volume-preserving additive coupling flow.

The stack maps observed embeddings ``x`` to latent embeddings ``e`` (the
inverse projection). Each layer keeps one contiguous half of the vector fixed
and shifts the other half by ``g(fixed half)``, where ``g`` is an
affine-rectifier-affine network whose hidden width equals the half width.
Consecutive layers swap which half is fixed, starting with the left half.

All functions accept either a single vector of shape ``(d,)`` or a batch of
shape ``(n, d)``.
"""
from dataclasses import dataclass, field

import numpy as np

LEFT_FIXED = "left"
RIGHT_FIXED = "right"

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class CouplingLayer:
    """One additive coupling layer.

    ``w1`` has shape (hidden, half), ``w2`` has shape (half, hidden).
    """

    side: str
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def half(self):
        return self.w1.shape[1]

    def split(self, x):
        h = self.half
        if self.side == LEFT_FIXED:
            return x[:, :h], x[:, h:]
        return x[:, h:], x[:, :h]

    def join(self, fixed, moved):
        if self.side == LEFT_FIXED:
            return np.concatenate([fixed, moved], axis=1)
        return np.concatenate([moved, fixed], axis=1)

    def coupling(self, fixed):
        pre = fixed @ self.w1.T + self.b1
        return np.maximum(pre, 0.0) @ self.w2.T + self.b2

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class Flow:
    dim: int
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError(f"flow dimension must be positive, got {self.dim}")
        if self.layers and self.dim % 2:
            # an empty flow is the identity and needs no split
            raise ValueError(f"coupling layers need an even dimension, got {self.dim}")
        for k, layer in enumerate(self.layers):
            expected = LEFT_FIXED if k % 2 == 0 else RIGHT_FIXED
            if layer.side != expected:
                raise ValueError(f"layer {k} must be {expected}-fixed (sides alternate)")
            if layer.half != self.dim // 2 or layer.w1.shape[0] != self.dim // 2:
                raise ValueError(f"layer {k} does not match flow dimension {self.dim}")

    @property
    def depth(self):
        return len(self.layers)

    def params(self):
        """Flat list of parameter arrays, layer by layer in ``PARAM_NAMES`` order."""
        return [p for layer in self.layers for p in layer.params()]

    def zeros_like_params(self):
        return [np.zeros_like(p) for p in self.params()]

    def copy(self):
        return Flow(self.dim, [CouplingLayer(l.side, *(p.copy() for p in l.params())) for l in self.layers])


def init_flow(dim, depth, seed=None, scale=1.0):
    """Randomly initialise a flow.

    Weights are uniform on ``[-sqrt(3/n_in), sqrt(3/n_in)]`` so that their
    standard deviation is ``sqrt(1/n_in)``; ``scale`` multiplies that range.
    Biases start at zero.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"flow dimension must be a positive even integer, got {dim}")
    if depth < 0:
        raise ValueError("depth must be non-negative")
    rng = np.random.default_rng(seed)
    half = dim // 2
    bound = scale * np.sqrt(3.0 / half)
    layers = []
    for k in range(depth):
        w1 = rng.uniform(-bound, bound, size=(half, half))
        w2 = rng.uniform(-bound, bound, size=(half, half))
        side = LEFT_FIXED if k % 2 == 0 else RIGHT_FIXED
        layers.append(CouplingLayer(side, w1, np.zeros(half), w2, np.zeros(half)))
    return Flow(dim, layers)


def _as_batch(flow, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != flow.dim:
        raise ValueError(f"expected vectors of dimension {flow.dim}, got shape {np.shape(x)}")
    return x, single


def inverse_apply(flow, x):
    """Map observed ``x`` to latent ``e``; returns ``(e, log_det)``.

    ``log_det`` is the log absolute Jacobian determinant per vector, which is
    identically zero for additive couplings.
    """
    h, single = _as_batch(flow, x)
    for layer in flow.layers:
        fixed, moved = layer.split(h)
        h = layer.join(fixed, moved + layer.coupling(fixed))
    log_det = np.zeros(h.shape[0])
    if single:
        return h[0], 0.0
    return h, log_det


def forward_apply(flow, e):
    """Map latent ``e`` to observed ``x`` (exact inverse of ``inverse_apply``)."""
    h, single = _as_batch(flow, e)
    for layer in reversed(flow.layers):
        fixed, moved = layer.split(h)
        h = layer.join(fixed, moved - layer.coupling(fixed))
    return h[0] if single else h


def inverse_apply_with_grad(flow, x, upstream, grads=None):
    """Backpropagate ``upstream . e`` through the inverse projection.

    Returns ``(e, grad_x, grads)`` where ``grads`` is a flat list aligned with
    ``flow.params()``. When ``grads`` is passed in, gradients are added to it
    in place. The rectifier uses subgradient 0 at exactly 0.
    """
    h, single = _as_batch(flow, x)
    g_e, _ = _as_batch(flow, upstream)
    if g_e.shape != h.shape:
        raise ValueError("upstream gradient shape does not match input")
    if grads is None:
        grads = flow.zeros_like_params()

    fixed_inputs = []
    for layer in flow.layers:
        fixed, moved = layer.split(h)
        fixed_inputs.append(fixed)
        h = layer.join(fixed, moved + layer.coupling(fixed))
    e = h

    g = g_e.copy()
    for k in range(flow.depth - 1, -1, -1):
        layer = flow.layers[k]
        fixed = fixed_inputs[k]
        g_fixed, g_moved = layer.split(g)
        pre = fixed @ layer.w1.T + layer.b1
        act = np.maximum(pre, 0.0)
        g_pre = (g_moved @ layer.w2) * (pre > 0.0)
        grads[4 * k] += g_pre.T @ fixed
        grads[4 * k + 1] += g_pre.sum(axis=0)
        grads[4 * k + 2] += g_moved.T @ act
        grads[4 * k + 3] += g_moved.sum(axis=0)
        g = layer.join(g_fixed + g_pre @ layer.w1, g_moved)

    if single:
        return e[0], g[0], grads
    return e, g, grads


def flow_to_dict(flow):
    return {
        "dim": flow.dim,
        "layers": [
            {"side": l.side, **{n: p.tolist() for n, p in zip(PARAM_NAMES, l.params())}}
            for l in flow.layers
        ],
    }


def flow_from_dict(d):
    layers = [
        CouplingLayer(l["side"], *(np.asarray(l[n], dtype=np.float64) for n in PARAM_NAMES))
        for l in d["layers"]
    ]
    return Flow(int(d["dim"]), layers)
