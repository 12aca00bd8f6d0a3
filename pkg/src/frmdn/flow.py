"""Invertible affine coupling stack.

Each layer leaves a masked half of the coordinates untouched and maps the
rest through x * exp(s_hat) + t, where s and t are one-hidden-layer
feed-forward networks of the untouched half and s_hat is bounded by
s_clamp * tanh.  The log-determinant of the Jacobian is the sum of s_hat
over transformed coordinates, and layers compose with log-determinants
adding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

DEFAULT_S_CLAMP = 5.0
DEFAULT_HIDDEN = 64


@dataclass
class CouplingLayer:
    mask: np.ndarray            # 1 = pass-through coordinate, 0 = transformed
    w1s: dc.DiffNode
    b1s: dc.DiffNode
    w2s: dc.DiffNode
    b2s: dc.DiffNode
    w1t: dc.DiffNode
    b1t: dc.DiffNode
    w2t: dc.DiffNode
    b2t: dc.DiffNode
    s_clamp: float = DEFAULT_S_CLAMP
    pass_idx: np.ndarray = field(init=False)
    trans_idx: np.ndarray = field(init=False)
    inv_perm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if not (np.any(self.mask == 1) and np.any(self.mask == 0)):
            raise ValueError("coupling mask needs both pass-through and "
                             "transformed coordinates")
        self.pass_idx = np.where(self.mask == 1)[0]
        self.trans_idx = np.where(self.mask == 0)[0]
        self.inv_perm = np.argsort(np.concatenate([self.pass_idx, self.trans_idx]))

    @property
    def dim(self):
        return self.mask.shape[0]

    def _nets_value(self, x_pass):
        """Numeric s_hat and t for a pass-through block (used by the inverse)."""
        hs = np.tanh(x_pass @ self.w1s.value + self.b1s.value)
        s_hat = self.s_clamp * np.tanh(hs @ self.w2s.value + self.b2s.value)
        ht = np.tanh(x_pass @ self.w1t.value + self.b1t.value)
        t = ht @ self.w2t.value + self.b2t.value
        return s_hat, t

    def parameters(self):
        return [
            ("w1s", self.w1s), ("b1s", self.b1s),
            ("w2s", self.w2s), ("b2s", self.b2s),
            ("w1t", self.w1t), ("b1t", self.b1t),
            ("w2t", self.w2t), ("b2t", self.b2t),
        ]


@dataclass
class FlowStack:
    layers: list

    @property
    def depth(self):
        return len(self.layers)

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"flow.{i}.{name}", node) for name, node in layer.parameters())
        return out


def make_coupling_layer(dim, mask, rng, hidden=DEFAULT_HIDDEN,
                        s_clamp=DEFAULT_S_CLAMP):
    """Hidden layers get scaled-uniform fan-in init; output layers start at
    zero so a fresh layer is the identity map."""
    mask = np.asarray(mask)
    d_pass = int(mask.sum())
    d_trans = dim - d_pass

    def hidden_init(n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        return dc.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))

    return CouplingLayer(
        mask=mask,
        w1s=hidden_init(d_pass, hidden),
        b1s=dc.parameter(np.zeros(hidden)),
        w2s=dc.parameter(np.zeros((hidden, d_trans))),
        b2s=dc.parameter(np.zeros(d_trans)),
        w1t=hidden_init(d_pass, hidden),
        b1t=dc.parameter(np.zeros(hidden)),
        w2t=dc.parameter(np.zeros((hidden, d_trans))),
        b2t=dc.parameter(np.zeros(d_trans)),
        s_clamp=s_clamp,
    )


def make_flow(dim, n_pairs, rng, hidden=DEFAULT_HIDDEN, s_clamp=DEFAULT_S_CLAMP):
    """Stack of `n_pairs` coupling pairs with alternating even/odd masks, so
    every coordinate is transformed once per pair."""
    if n_pairs < 0:
        raise ValueError("n_pairs must be non-negative")
    if n_pairs > 0 and dim < 2:
        raise ValueError("coupling layers need dim >= 2")
    even = (np.arange(dim) % 2 == 0).astype(np.int64)
    layers = []
    for _ in range(n_pairs):
        layers.append(make_coupling_layer(dim, even, rng, hidden, s_clamp))
        layers.append(make_coupling_layer(dim, 1 - even, rng, hidden, s_clamp))
    return FlowStack(layers)


# ---------------------------------------------------------------------------
# forward (graph) and inverse (numeric)
# ---------------------------------------------------------------------------

def coupling_forward(x, layer):
    """One coupling layer on a batch node (n, d).

    Returns (y node, per-row log-determinant node of shape (n,)).
    """
    x = x if isinstance(x, dc.DiffNode) else dc.constant(x)
    xp = dc.slice_cols(x, layer.pass_idx)
    xt = dc.slice_cols(x, layer.trans_idx)
    hs = dc.tanh(dc.add(dc.matmul(xp, layer.w1s), layer.b1s))
    s_hat = dc.scale(dc.tanh(dc.add(dc.matmul(hs, layer.w2s), layer.b2s)),
                     layer.s_clamp)
    ht = dc.tanh(dc.add(dc.matmul(xp, layer.w1t), layer.b1t))
    t = dc.add(dc.matmul(ht, layer.w2t), layer.b2t)
    yt = dc.add(dc.mul(xt, dc.exp(s_hat)), t)
    y = dc.slice_cols(dc.concat([xp, yt], axis=1), layer.inv_perm)
    log_det = dc.reduce_sum(s_hat, axis=1)
    return y, log_det


def coupling_inverse(y, layer):
    """Numeric inverse of one layer on a batch array (n, d)."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    yp = y[:, layer.pass_idx]
    s_hat, t = layer._nets_value(yp)
    x = np.empty_like(y)
    x[:, layer.pass_idx] = yp
    x[:, layer.trans_idx] = (y[:, layer.trans_idx] - t) * np.exp(-s_hat)
    return x


def flow_forward(y, stack):
    """Compose all layers; total log-determinant is the sum over layers."""
    z = y if isinstance(y, dc.DiffNode) else dc.constant(y)
    total = None
    for layer in stack.layers:
        z, ld = coupling_forward(z, layer)
        total = ld if total is None else dc.add(total, ld)
    if total is None:
        total = dc.constant(np.zeros(z.value.shape[0]))
    return z, total


def flow_inverse(z, stack):
    """Numeric inverse of the whole stack (layers applied in reverse)."""
    x = np.atleast_2d(np.asarray(z, dtype=np.float64))
    for layer in reversed(stack.layers):
        x = coupling_inverse(x, layer)
    return x
