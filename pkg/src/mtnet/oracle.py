"""Literal closed-form evolutions of the RNN, Transformer encoder/decoder
and MTN encoder, used to cross-check the modular implementation.

Nothing here calls into the tensor/attention/transformer forward code. The
identity matrices, ones columns, selection matrices M_t, the stacking
matrices C_t(q) and the session mask R_S are all materialized explicitly;
the inefficiency is deliberate. Parameters are read as plain arrays.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import AttentionParams

NEG_INF = -np.inf


# ---------------------------------------------------------------------------
# independent primitives


def _softmax(z: np.ndarray) -> np.ndarray:
    out = np.zeros_like(z)
    for i in range(z.shape[0]):
        row = z[i]
        top = max(v for v in row)
        e = np.array([math.exp(v - top) if v != NEG_INF else 0.0 for v in row])
        out[i] = e / e.sum()
    return out


def _psi(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    out = np.empty_like(x)
    n = x.shape[1]
    for i in range(x.shape[0]):
        mean = sum(x[i]) / n
        var = sum((v - mean) ** 2 for v in x[i]) / n
        out[i] = (x[i] - mean) / math.sqrt(var + eps)
    return out * gain + bias


def _phi(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, 0.0)


def _ones(n: int) -> np.ndarray:
    return np.ones((n, 1))


def _apply_mask(mask: Optional[np.ndarray], logits: np.ndarray) -> np.ndarray:
    """Mask matrix with 1 at valid and -inf at invalid coordinates, applied so
    that valid logits pass unchanged and invalid ones become -inf."""
    if mask is None:
        return logits
    return np.where(mask == 1.0, logits, NEG_INF)


def mask_matrix(valid: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(valid, dtype=bool), 1.0, NEG_INF)


def lower_triangular_mask(n: int) -> np.ndarray:
    """R: ones on and below the diagonal, -inf above."""
    r = np.full((n, n), NEG_INF)
    for i in range(n):
        for j in range(i + 1):
            r[i, j] = 1.0
    return r


def selection(t: int, cols: int) -> np.ndarray:
    m = np.zeros((t, cols))
    for r in range(t):
        m[r, r] = 1.0
    return m


def stacking(n: int, s: int, col: int) -> np.ndarray:
    """C_t(q): n x |S|, ones in column ``col`` and zeros elsewhere."""
    c = np.zeros((n, s))
    c[:, col] = 1.0
    return c


def positional(max_pos: int, d: int) -> np.ndarray:
    pe = np.zeros((max_pos, d))
    for pos in range(max_pos):
        for i in range(d // 2):
            angle = pos / 10000.0 ** (2 * i / d)
            pe[pos, 2 * i] = math.sin(angle)
            pe[pos, 2 * i + 1] = math.cos(angle)
    return pe


# ---------------------------------------------------------------------------
# sublayers written as in the closed forms


def _attention_sublayer(att: AttentionParams, e_q: np.ndarray, e_kv: np.ndarray, d: int,
                        mask: Optional[np.ndarray], self_case: bool) -> np.ndarray:
    heads = []
    for h in att.heads:
        z1, z2, z3 = h.z1.data, h.z2.data, h.z3.data
        logits = e_q @ z1 @ z2.T @ e_kv.T / math.sqrt(d)
        a = _softmax(_apply_mask(mask, logits))
        if self_case:
            heads.append((np.eye(e_q.shape[0]) + a) @ e_kv @ z3)
        else:
            heads.append(e_q @ z3 + a @ e_kv @ z3)
    if att.simplex is None:
        return np.hstack(heads) @ att.z4_joint.data
    kappa = _softmax(att.simplex.kappa_logits.data)[0]
    alpha = _softmax(att.simplex.alpha_logits.data)[0]
    total = np.zeros((e_q.shape[0], e_q.shape[1]))
    for i, h in enumerate(att.heads):
        total = total + alpha[i] * (kappa[i] * heads[i] @ h.z4.data)
    return total


def _ffn_block(x: np.ndarray, ffn, norm, eps: float) -> np.ndarray:
    n = x.shape[0]
    hidden = _phi(x @ ffn.w1.data + _ones(n) @ ffn.b1.data)
    return _psi(x + hidden @ ffn.w2.data + _ones(n) @ ffn.b2.data, norm.gain.data, norm.bias.data, eps)


def _encoder_layer(e: np.ndarray, layer, eps: float, mask=None) -> np.ndarray:
    d = e.shape[1]
    e_hat = _psi(_attention_sublayer(layer.attn, e, e, d, mask, True),
                 layer.norm_attn.gain.data, layer.norm_attn.bias.data, eps)
    return _ffn_block(e_hat, layer.ffn, layer.norm_ffn, eps)


def prop2_unrolled(x: np.ndarray, layers, eps: float = 1e-5, mask=None) -> list:
    """Encoder outputs Y_1..Y_L; ``mask`` is an optional {1, -inf} matrix."""
    outs = []
    e = np.array(x, dtype=np.float64)
    for layer in layers:
        e = _encoder_layer(e, layer, eps, mask)
        outs.append(e)
    return outs


def prop3_unrolled(x_target: np.ndarray, y_enc: np.ndarray, layers, eps: float = 1e-5,
                   cross_mask=None) -> list:
    """For each layer, the list [Y_{l,1}, ..., Y_{l,m}] of time-t outputs."""
    d_prev = np.array(x_target, dtype=np.float64)
    m, d = d_prev.shape
    R = lower_triangular_mask(m)
    per_layer = []
    for layer in layers:
        d_hat = _psi(_attention_sublayer(layer.self_attn, d_prev, d_prev, d, R, True),
                     layer.norm_self.gain.data, layer.norm_self.bias.data, eps)
        d_tilde = _psi(_attention_sublayer(layer.cross_attn, d_hat, y_enc, d, cross_mask, False),
                       layer.norm_cross.gain.data, layer.norm_cross.bias.data, eps)
        ffn = layer.ffn
        inner = _phi(d_tilde @ ffn.w1.data + _ones(m) @ ffn.b1.data) @ ffn.w2.data
        outs = []
        for t in range(1, m + 1):
            M_t = selection(t, m)
            outs.append(_psi(M_t @ d_tilde + M_t @ inner + _ones(t) @ ffn.b2.data,
                             layer.norm_ffn.gain.data, layer.norm_ffn.bias.data, eps))
        per_layer.append(outs)
        d_prev = outs[-1]
    return per_layer


def embed_tokens(ids, model) -> np.ndarray:
    """sqrt(d) * B_emb rows (through the input projection) + PE."""
    ids = list(ids)
    d = model.config.d
    table = model.embed.b_emb.data
    x = np.vstack([table[i] for i in ids])
    if model.embed.input_proj is not None:
        x = x @ model.embed.input_proj.data
    return math.sqrt(d) * x + positional(len(ids), d)


def prop4_unrolled(queries: np.ndarray, pad_mask: np.ndarray, model) -> list:
    """Y~_{2,L2,t(q)} for t(q) = 1..|S| of a single session.

    ``queries`` is an (|S| x n) id grid, ``pad_mask`` its validity.
    """
    eps = model.config.ln_eps
    S, n = queries.shape
    d = model.config.d
    y1 = []
    for q in range(S):
        key_mask = mask_matrix(np.tile(pad_mask[q][None, :], (n, 1)))
        e = embed_tokens(queries[q], model)
        for layer in model.query_layers:
            e = _encoder_layer(e, layer, eps, key_mask)
        y1.append(e)
    w_proj = model.projections[0].w_proj.data
    codes = np.vstack([w_proj @ y1[q] for q in range(S)])
    session_layers = model.session_layers
    if session_layers:
        e2 = codes + positional(S, d)
        R_S = lower_triangular_mask(S)
        for layer in session_layers:
            e2 = _encoder_layer(e2, layer, eps, R_S)
    else:
        e2 = codes
    Y1 = np.vstack(y1)  # n|S| x d
    Y2_hat = np.vstack([stacking(n, S, q) @ e2 for q in range(S)])  # C_t(q) E_2
    fusion = model.fusion_norm
    outs = []
    for t in range(1, S + 1):
        M = selection(n * t, n * S)
        outs.append(_psi(M @ (Y1 + Y2_hat), fusion.gain.data, fusion.bias.data, eps))
    return outs


# ---------------------------------------------------------------------------
# verification suite


TOL_EQUIV = 1e-10
TOL_PROP1 = 1e-12
TOL_CAUSAL = 1e-12


@dataclass
class Report:
    lines: list = field(default_factory=list)
    worst: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)  # tag -> per-trial errors
    tolerances: dict = field(default_factory=dict)
    failed: bool = False

    def add(self, tag: str, trial: int, err: float, tol: float) -> None:
        ok = bool(np.isfinite(err) and err <= tol)
        self.failed = self.failed or not ok
        self.lines.append(f"{tag} trial={trial} max_abs_err={err:.3e} {'PASS' if ok else 'FAIL'}")
        self.worst[tag] = max(self.worst.get(tag, 0.0), err)
        self.errors.setdefault(tag, []).append(err)
        self.tolerances[tag] = tol

    @property
    def passed(self) -> bool:
        return not self.failed

    def text(self) -> str:
        return "\n".join(self.lines + [f"SUITE {'PASS' if self.passed else 'FAIL'}"]) + "\n"


def _randomize(obj, rng, low=-1.0, high=1.0) -> None:
    from .tensor import named_parameters

    for _, t in named_parameters(obj):
        t.data = rng.uniform(low, high, size=t.shape)


def _flip_first(obj) -> None:
    from .tensor import named_parameters

    _, t = named_parameters(obj)[0]
    t.data = -t.data


def _random_dims(rng):
    P = int(rng.integers(1, 3))
    d = int(rng.choice([4, 6, 8] if P == 1 else [4, 8]))
    return d, P


def _check_prop1(rng, fault: bool) -> float:
    from .recurrent import RnnParams, rnn_masked_form, rnn_unroll

    n = int(rng.integers(1, 9))
    d_in, d_h, d_out = (int(v) for v in rng.integers(1, 9, size=3))
    phi_h = str(rng.choice(["tanh", "relu"]))
    phi_y = str(rng.choice(["identity", "relu"]))
    p = RnnParams.random(rng, d_in, d_h, d_out, phi_h, phi_y)
    x = rng.uniform(-1, 1, size=(n, d_in))
    _, Y = rnn_unroll(x, p)
    q = copy.deepcopy(p)
    if fault:
        q.u_h = -q.u_h
        q.b_y = -q.b_y
    worst = 0.0
    for t in range(1, n + 1):
        worst = max(worst, float(np.abs(rnn_masked_form(x, q, t) - Y[:t]).max()))
    return worst


def _check_prop2(rng, fault: bool) -> float:
    from .tensor import Tensor
    from .transformer import encoder_layer_forward, init_encoder_layer

    d, P = _random_dims(rng)
    n = int(rng.integers(1, 6))
    L = int(rng.integers(1, 3))
    mode = "weighted" if rng.random() < 0.25 else "concat"
    layers = [init_encoder_layer(rng, d, d + 2, P, mode) for _ in range(L)]
    _randomize(layers, rng)
    x = rng.uniform(-1, 1, size=(n, d))
    modular = []
    e = Tensor(x)
    for layer in layers:
        e = encoder_layer_forward(e, layer)
        modular.append(e.data)
    view = copy.deepcopy(layers)
    if fault:
        _flip_first(view[0].ffn)
    oracle = prop2_unrolled(x, view)
    return max(float(np.abs(a - b).max()) for a, b in zip(modular, oracle))


def _check_prop3(rng, fault: bool) -> float:
    from .tensor import Tensor
    from .transformer import decoder_layer_forward, init_decoder_layer

    d, P = _random_dims(rng)
    m = int(rng.integers(1, 6))
    n = int(rng.integers(1, 6))
    L = int(rng.integers(1, 3))
    layers = [init_decoder_layer(rng, d, d + 2, P) for _ in range(L)]
    _randomize(layers, rng)
    x = rng.uniform(-1, 1, size=(m, d))
    y_enc = rng.uniform(-1, 1, size=(n, d))
    modular = []
    out = Tensor(x)
    for layer in layers:
        out = decoder_layer_forward(out, Tensor(y_enc), layer)
        modular.append(out.data)
    view = copy.deepcopy(layers)
    if fault:
        _flip_first(view[-1].ffn)
    oracle = prop3_unrolled(x, y_enc, view)
    worst = 0.0
    for l in range(L):
        worst = max(worst, float(np.abs(oracle[l][-1] - modular[l]).max()))
        # every time-t output is the t-row prefix of the full output
        for t in range(1, m + 1):
            worst = max(worst, float(np.abs(oracle[l][t - 1] - modular[l][:t]).max()))
    return worst


def _random_session(rng, vocab: int, S: int, n: int):
    lengths = rng.integers(1, n + 1, size=S)
    ids = rng.integers(4, vocab, size=(S, n))
    valid = np.arange(n)[None, :] < lengths[:, None]
    ids = np.where(valid, ids, 0)
    return ids, valid


def _small_mtn(rng, L2=None):
    from .config import ModelConfig
    from .mtn import MTNModel

    d, P = _random_dims(rng)
    n = int(rng.integers(1, 6))
    L1 = int(rng.integers(1, 3))
    L2 = int(rng.integers(1, 3)) if L2 is None else L2
    cfg = ModelConfig(d=d, d_f=d + 2, d_emb=d, P=P, L=L1, L_dec=int(rng.integers(1, 3)), L_levels=[L2],
                      vocab_size=12, max_query_len=n, dropout=0.0, label_smoothing=0.0)
    model = MTNModel(cfg, rng)
    for _, t in model.named_parameters():
        if not _.startswith("proj") and not _.startswith("embed"):
            t.data = rng.uniform(-1, 1, size=t.shape)
    return model


def _check_prop4(rng, fault: bool) -> float:
    from .mtn import SessionBatch, mtn_encode

    model = _small_mtn(rng)
    S = int(rng.integers(1, 5))
    n = model.config.max_query_len
    model.projections[0].w_proj.data = rng.uniform(-1, 1, size=(1, n))
    ids, valid = _random_session(rng, model.config.vocab_size, S, n)
    fused = mtn_encode(SessionBatch(ids, valid), model).data
    view = copy.deepcopy(model)
    if fault:
        _flip_first(view.session_layers[0].ffn)
    oracle = prop4_unrolled(ids, valid, view)
    worst = 0.0
    for t in range(1, S + 1):
        worst = max(worst, float(np.abs(oracle[t - 1] - fused[: n * t]).max()))
    return worst


def _check_decoder_causality(rng) -> float:
    from .tensor import Tensor
    from .transformer import decoder_forward, init_decoder_layer

    d, P = _random_dims(rng)
    m, n = int(rng.integers(2, 6)), int(rng.integers(1, 6))
    layers = [init_decoder_layer(rng, d, d + 2, P) for _ in range(int(rng.integers(1, 3)))]
    _randomize(layers, rng)
    x = rng.uniform(-1, 1, size=(m, d))
    y_enc = Tensor(rng.uniform(-1, 1, size=(n, d)))
    base = decoder_forward(Tensor(x), y_enc, layers).data
    worst = 0.0
    for t in range(m - 1):
        x2 = x.copy()
        x2[t + 1:] = rng.uniform(-5, 5, size=x2[t + 1:].shape)
        pert = decoder_forward(Tensor(x2), y_enc, layers).data
        trunc = decoder_forward(Tensor(x[: t + 1]), y_enc, layers).data
        worst = max(worst, float(np.abs(pert[: t + 1] - base[: t + 1]).max()),
                    float(np.abs(trunc - base[: t + 1]).max()))
    return worst


def _check_session_causality(rng) -> float:
    from .mtn import SessionBatch, mtn_encode

    model = _small_mtn(rng)
    S = int(rng.integers(2, 5))
    n = model.config.max_query_len
    ids, valid = _random_session(rng, model.config.vocab_size, S, n)
    base = mtn_encode(SessionBatch(ids, valid), model).data
    worst = 0.0
    for t in range(1, S):
        ids2, valid2 = _random_session(rng, model.config.vocab_size, S, n)
        ids2[:t], valid2[:t] = ids[:t], valid[:t]
        pert = mtn_encode(SessionBatch(ids2, valid2), model).data
        trunc = mtn_encode(SessionBatch(ids[:t], valid[:t]), model).data
        worst = max(worst, float(np.abs(pert[: n * t] - base[: n * t]).max()),
                    float(np.abs(trunc - base[: n * t]).max()))
    return worst


CHECKS = {
    "PROP1": (_check_prop1, TOL_PROP1),
    "PROP2": (_check_prop2, TOL_EQUIV),
    "PROP3": (_check_prop3, TOL_EQUIV),
    "PROP4": (_check_prop4, TOL_EQUIV),
}


CAUSAL_CHECKS = {
    "CAUSAL-DECODER": _check_decoder_causality,
    "CAUSAL-SESSION": _check_session_causality,
}

TAGS = tuple(CHECKS) + tuple(CAUSAL_CHECKS)


def run_verification_suite(seed: int = 0, trials: int = 100, fault: Optional[str] = None,
                           only: Optional[Sequence[str]] = None) -> Report:
    """Seeded cross-checks of the four unrolled forms plus causality probes.

    ``fault`` names one of PROP1..PROP4; that check then runs its oracle on a
    copy of the parameters with one tensor sign-flipped. ``only`` restricts
    the run to some tags; each trial's seed depends only on its tag and
    index, so a restricted run reproduces the matching lines of a full one.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if fault is not None and fault not in CHECKS:
        raise ValueError(f"fault must be one of {sorted(CHECKS)}")
    wanted = set(TAGS if only is None else only)
    if wanted - set(TAGS):
        raise ValueError(f"unknown check tags {sorted(wanted - set(TAGS))}")
    report = Report()
    for k, (tag, (check, tol)) in enumerate(CHECKS.items()):
        if tag in wanted:
            for i in range(trials):
                rng = np.random.default_rng([seed, k, i])
                report.add(tag, i, check(rng, fault == tag), tol)
    for k, (tag, check) in enumerate(CAUSAL_CHECKS.items()):
        if tag in wanted:
            for i in range(trials):
                rng = np.random.default_rng([seed, 10 + k, i])
                report.add(tag, i, check(rng), TOL_CAUSAL)
    return report
