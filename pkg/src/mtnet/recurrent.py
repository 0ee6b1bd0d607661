"""Elman RNN and its reformulation as one masked layer.

The masked form concatenates each input row with the previous hidden state,
stacks the input and recurrent weights, and recovers the first t outputs
with a prefix-of-identity selection matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = {
    "identity": lambda z: z,
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
}


@dataclass
class RnnParams:
    w_h: np.ndarray  # d_in x d_h
    u_h: np.ndarray  # d_h x d_h
    b_h: np.ndarray  # 1 x d_h
    w_y: np.ndarray  # d_h x d_out
    b_y: np.ndarray  # 1 x d_out
    phi_h: str = "tanh"
    phi_y: str = "identity"

    def __post_init__(self):
        for name in ("w_h", "u_h", "b_h", "w_y", "b_y"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        d_h = self.u_h.shape[0]
        if self.u_h.shape != (d_h, d_h):
            raise ValueError(f"u_h must be square, got {self.u_h.shape}")
        if self.w_h.shape[1] != d_h or self.b_h.shape != (1, d_h) or self.w_y.shape[0] != d_h:
            raise ValueError("inconsistent hidden width across w_h, u_h, b_h, w_y")
        if self.b_y.shape != (1, self.w_y.shape[1]):
            raise ValueError("b_y must be 1 x d_out")
        for act in (self.phi_h, self.phi_y):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; choose from {sorted(ACTIVATIONS)}")

    @property
    def d_in(self) -> int:
        return self.w_h.shape[0]

    @property
    def d_h(self) -> int:
        return self.u_h.shape[0]

    @classmethod
    def random(cls, rng, d_in, d_h, d_out, phi_h="tanh", phi_y="identity", low=-1.0, high=1.0):
        u = lambda *s: rng.uniform(low, high, size=s)
        return cls(u(d_in, d_h), u(d_h, d_h), u(1, d_h), u(d_h, d_out), u(1, d_out), phi_h, phi_y)


def rnn_step(x_t, h_prev, p: RnnParams):
    x_t = np.atleast_2d(x_t)
    h_prev = np.atleast_2d(h_prev)
    if x_t.shape != (1, p.d_in) or h_prev.shape != (1, p.d_h):
        raise ValueError(f"step expects x 1x{p.d_in} and h 1x{p.d_h}, got {x_t.shape} and {h_prev.shape}")
    h_t = ACTIVATIONS[p.phi_h](x_t @ p.w_h + h_prev @ p.u_h + p.b_h)
    y_t = ACTIVATIONS[p.phi_y](h_t @ p.w_y + p.b_y)
    return h_t, y_t


def rnn_unroll(x, p: RnnParams, h0=None):
    """Run the recurrence over the rows of ``x``; returns (H, Y)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = np.zeros((1, p.d_h)) if h0 is None else np.atleast_2d(h0)
    hs, ys = [], []
    for t in range(x.shape[0]):
        h, y = rnn_step(x[t:t + 1], h, p)
        hs.append(h)
        ys.append(y)
    return np.vstack(hs), np.vstack(ys)


def selection_matrix(t: int, n: int) -> np.ndarray:
    """The first t rows of the n x n identity."""
    return np.eye(n)[:t]


def rnn_masked_form(x, p: RnnParams, t: int, h0=None) -> np.ndarray:
    """Y_t = phi_y(M_t phi_h(X~ W~ + 1 b_h) W_y + 1 b_y).

    X~ holds rows concat(x_r, h_{r-1}); the hidden states are taken from the
    recurrence, which is what makes this a reformulation rather than a
    parallel algorithm. The selection is applied after the output projection
    (same product, regrouped) so that Y_t is bitwise the prefix of Y_{t+1}.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if not 1 <= t <= n:
        raise ValueError(f"t must lie in [1, {n}], got {t}")
    H, _ = rnn_unroll(x, p, h0)
    h_first = np.zeros((1, p.d_h)) if h0 is None else np.atleast_2d(h0)
    h_prev = np.vstack([h_first, H[:-1]])
    x_tilde = np.hstack([x, h_prev])
    w_tilde = np.vstack([p.w_h, p.u_h])
    ones = np.ones((n, 1))
    hidden = ACTIVATIONS[p.phi_h](x_tilde @ w_tilde + ones @ p.b_h)
    m_t = selection_matrix(t, n)
    return ACTIVATIONS[p.phi_y](m_t @ (hidden @ p.w_y + ones @ p.b_y))
