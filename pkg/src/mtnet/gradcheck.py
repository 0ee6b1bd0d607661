"""Finite-difference sweep over every parameter tensor of a toy model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .mtn import SessionBatch, build_model
from .tensor import finite_diff_check
from .training import batch_loss
from .transformer import RunMode


def toy_config(attention_mode: str = "concat", architecture: str = "mtn") -> ModelConfig:
    return ModelConfig(d=8, d_f=16, d_emb=8, P=2, L=1, L_dec=1, L_levels=[1], vocab_size=12,
                       dropout=0.0, label_smoothing=0.1, max_query_len=3, attention_mode=attention_mode,
                       architecture=architecture, seed=0)


def toy_batch() -> SessionBatch:
    """Two sessions of two queries, three token slots each (one padded slot)."""
    q = np.array([[[4, 5, 6], [7, 8, 0]],
                  [[9, 10, 11], [5, 4, 6]]])
    t_in = np.array([[2, 6, 7], [2, 11, 0]])
    t_out = np.array([[6, 7, 3], [11, 3, 0]])
    return SessionBatch(q, q != 0, t_in, t_out)


@dataclass
class GroupResult:
    name: str
    shape: tuple
    coords: int
    rel_err: float


def gradient_sweep(seed: int = 0, coords_per_group: int = 4, attention_mode: str = "concat",
                   architecture: str = "mtn", h: float = 1e-5, floor: float = 1e-6) -> list:
    """Relative error between tape and central-difference gradients for a
    random sample of coordinates in every parameter tensor.

    Parameters are drawn away from their initial values so that zero-initialized
    tensors (biases, attention-weight logits) get generic gradients.
    """
    rng = np.random.default_rng(seed)
    model = build_model(toy_config(attention_mode, architecture), rng)
    for _, p in model.named_parameters():
        p.data = p.data + rng.uniform(-0.3, 0.3, size=p.shape)
    batch = toy_batch()
    mode = RunMode(eps=model.config.ln_eps)
    smoothing = model.config.label_smoothing
    out = []
    for name, p in model.named_parameters():
        size = p.data.size
        k = min(coords_per_group, size)
        flat = rng.choice(size, size=k, replace=False)
        coords = [divmod(int(i), p.cols) for i in flat]
        err = finite_diff_check(lambda _: batch_loss(model, batch, mode, smoothing), p, h=h,
                                coords=coords, floor=floor)
        out.append(GroupResult(name, p.shape, k, err))
    return out
