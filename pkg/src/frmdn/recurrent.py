"""LSTM backbone and the linear head that emits per-step mixture parameters.

The head output of width K + K*d + K*d is split into coefficient logits,
raw means, and scale logits; softmax and clamped exp keep the resulting
mixture parameters inside their valid ranges for any hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import mixtures as mx


@dataclass
class LstmParams:
    """Fused gate weights, ordered (input, forget, cell, output)."""

    w: dc.DiffNode        # (input_dim + hidden, 4 * hidden)
    b: dc.DiffNode        # (4 * hidden,)
    input_dim: int
    hidden: int

    def parameters(self):
        return [("lstm.w", self.w), ("lstm.b", self.b)]


@dataclass
class RecurrentState:
    h: dc.DiffNode
    c: dc.DiffNode


@dataclass
class HeadParams:
    """Linear map from the hidden state to mixture parameter logits."""

    w: dc.DiffNode        # (hidden, K + 2*K*d)
    b: dc.DiffNode
    k: int
    dim: int
    structure: str = "diagonal"
    u: dc.DiffNode | None = None    # shared matrix, tied structure only

    def parameters(self):
        out = [("head.w", self.w), ("head.b", self.b)]
        if self.u is not None:
            out.append(("head.u", self.u))
        return out


def init_lstm(input_dim, hidden, rng):
    """Scaled-uniform fan-in weights; forget-gate bias starts at 1 so early
    gradients reach back through time."""
    fan_in = input_dim + hidden
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0
    return LstmParams(dc.parameter(w), dc.parameter(b), input_dim, hidden)


def init_head(hidden, k, dim, structure, rng):
    out_dim = k + 2 * k * dim
    bound = 1.0 / np.sqrt(hidden)
    w = rng.uniform(-bound, bound, size=(hidden, out_dim))
    u = dc.parameter(np.eye(dim)) if structure == "tied" else None
    return HeadParams(dc.parameter(w), dc.parameter(np.zeros(out_dim)),
                      k, dim, structure, u)


def initial_state(batch, hidden):
    zeros = np.zeros((batch, hidden))
    return RecurrentState(dc.constant(zeros), dc.constant(zeros.copy()))


def lstm_step(x, state, params):
    """One cell update on a batch node (q, input_dim).

    Returns (h, new_state); h is the same node stored in the state.
    """
    x = x if isinstance(x, dc.DiffNode) else dc.constant(x)
    H = params.hidden
    if x.value.ndim != 2 or x.value.shape[1] != params.input_dim:
        raise ValueError(
            f"lstm_step: expected input (*, {params.input_dim}), "
            f"got {x.value.shape}"
        )
    if state.h.value.shape != (x.value.shape[0], H):
        raise ValueError(
            f"lstm_step: state shape {state.h.value.shape} does not match "
            f"batch {x.value.shape[0]} and hidden size {H}"
        )
    xh = dc.concat([x, state.h], axis=1)
    pre = dc.add(dc.matmul(xh, params.w), params.b)
    idx = np.arange(4 * H)
    i = dc.sigmoid(dc.slice_cols(pre, idx[:H]))
    f = dc.sigmoid(dc.slice_cols(pre, idx[H : 2 * H]))
    g = dc.tanh(dc.slice_cols(pre, idx[2 * H : 3 * H]))
    o = dc.sigmoid(dc.slice_cols(pre, idx[3 * H :]))
    c = dc.add(dc.mul(f, state.c), dc.mul(i, g))
    h = dc.mul(o, dc.tanh(c))
    return h, RecurrentState(h, c)


def head_logits(h, head):
    """Split the linear head output into its three logit blocks (graph
    nodes): coefficient logits (n, K), raw means (n, K*d), scale logits
    (n, K*d)."""
    h = h if isinstance(h, dc.DiffNode) else dc.constant(h)
    out = dc.add(dc.matmul(h, head.w), head.b)
    k, d = head.k, head.dim
    cols = np.arange(k + 2 * k * d)
    alpha = dc.slice_cols(out, cols[:k])
    mu = dc.slice_cols(out, cols[k : k + k * d])
    scale_logits = dc.slice_cols(out, cols[k + k * d :])
    return alpha, mu, scale_logits


def head_project(h_vec, head):
    """Numeric mixture parameters for one hidden vector (sampling path).

    Coefficients go through the softmax, means stay raw, and scale logits go
    through the clamped exponential.
    """
    h_vec = np.asarray(h_vec, dtype=np.float64).ravel()
    out = h_vec @ head.w.value + head.b.value
    k, d = head.k, head.dim
    alpha = mx.coeffs_from_logits(out[:k])
    mu = out[k : k + k * d].reshape(k, d)
    scales = mx.diag_scales_from_logits(out[k + k * d :].reshape(k, d))
    return mx.MixtureParams(alpha, mu, scales, head.structure)
