"""Parametric building blocks: MLPs, an LSTM cell, and attention.

Layer functions are pure: they read parameters from a mapping of bound tape
variables (``pv``) under a name prefix, so one :class:`ParamStore` can hold a
whole model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ParamStore, ShapeError, Var

ACTIVATIONS = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "identity": lambda v: v,
}

ATTENTION_KINDS = ("uniform", "laplace", "dotproduct", "multihead")


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(store: ParamStore, prefix: str, d_in: int, d_out: int, rng, bias: bool = True):
    store.add(f"{prefix}.W", _uniform_init(rng, d_in, (d_in, d_out)))
    if bias:
        store.add(f"{prefix}.b", np.zeros(d_out))


def linear(pv: Dict[str, Var], prefix: str, x: Var) -> Var:
    w = pv[f"{prefix}.W"]
    d_in, d_out = w.shape
    if x.shape[-1] != d_in:
        raise ShapeError("linear", [x.shape, w.shape], f"{prefix}: input width {x.shape[-1]} != {d_in}")
    lead = x.shape[:-1]
    # fold leading dims so the weight gradient is a single 2-d product
    flat = x if x.ndim == 2 else x.reshape(-1, d_in)
    y = flat @ w
    if f"{prefix}.b" in pv:
        y = y + pv[f"{prefix}.b"]
    return y if x.ndim == 2 else y.reshape(*lead, d_out)


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpConfig:
    """Layer widths ``(input, hidden..., output)`` and activations."""

    widths: Tuple[int, ...]
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ContractError("MlpConfig needs at least one linear layer")
        if any(int(w) < 1 for w in self.widths):
            raise ContractError(f"MlpConfig widths must be >= 1, got {self.widths}")
        for a in (self.activation, self.output_activation):
            if a not in ACTIVATIONS:
                raise ContractError(f"unknown activation {a!r}")


def init_mlp(store: ParamStore, prefix: str, cfg: MlpConfig, rng) -> None:
    for k, (a, b) in enumerate(zip(cfg.widths[:-1], cfg.widths[1:])):
        init_linear(store, f"{prefix}.{k}", a, b, rng)


def mlp_forward(pv: Dict[str, Var], prefix: str, cfg: MlpConfig, x: Var) -> Var:
    if x.shape[-1] != cfg.widths[0]:
        raise ShapeError("mlp", [x.shape], f"{prefix}: expected input width {cfg.widths[0]}")
    n_layers = len(cfg.widths) - 1
    h = x
    for k in range(n_layers):
        h = linear(pv, f"{prefix}.{k}", h)
        act = cfg.activation if k < n_layers - 1 else cfg.output_activation
        h = ACTIVATIONS[act](h)
    return h


# ---------------------------------------------------------------------------
# LSTM

# gate blocks are stacked column-wise in this order
GATES = ("i", "f", "o", "g")


class LstmState(NamedTuple):
    h: Var
    c: Var


def init_lstm(store: ParamStore, prefix: str, d_x: int, d_h: int, rng, forget_bias: float = 1.0):
    """Stacked gate weights ``W: (d_x + d_h, 4 d_h)`` over ``[x; h]`` and bias ``(4 d_h,)``.

    The input rows and the recurrent rows are two separate affine maps, so each
    block is drawn with its own fan-in. A shared ``d_x + d_h`` fan-in would
    shrink low-dimensional input weights until the cell barely sees its input.
    """
    w_x = _uniform_init(rng, d_x, (d_x, 4 * d_h))
    w_h = _uniform_init(rng, d_h, (d_h, 4 * d_h))
    store.add(f"{prefix}.W", np.concatenate([w_x, w_h]))
    b = np.zeros(4 * d_h)
    b[d_h : 2 * d_h] = forget_bias
    store.add(f"{prefix}.b", b)


def lstm_dims(pv: Dict[str, Var], prefix: str) -> Tuple[int, int]:
    rows, cols = pv[f"{prefix}.W"].shape
    d_h = cols // 4
    return rows - d_h, d_h


def zero_state(tape: ad.Tape, batch: int, d_h: int) -> LstmState:
    z = tape.const(np.zeros((batch, d_h)))
    return LstmState(z, z)


def _gates(pre: Var, d_h: int, state: LstmState) -> LstmState:
    i = ad.sigmoid(pre[..., 0:d_h])
    f = ad.sigmoid(pre[..., d_h : 2 * d_h])
    o = ad.sigmoid(pre[..., 2 * d_h : 3 * d_h])
    g = ad.tanh(pre[..., 3 * d_h : 4 * d_h])
    c = f * state.c + i * g
    return LstmState(o * ad.tanh(c), c)


def lstm_step(pv: Dict[str, Var], prefix: str, state: LstmState, x: Var) -> LstmState:
    d_x, d_h = lstm_dims(pv, prefix)
    if x.shape[-1] != d_x or state.h.shape[-1] != d_h or state.c.shape[-1] != d_h:
        raise ShapeError("lstm_step", [x.shape, state.h.shape, state.c.shape])
    pre = ad.concat([x, state.h], axis=-1) @ pv[f"{prefix}.W"] + pv[f"{prefix}.b"]
    return _gates(pre, d_h, state)


def lstm_encode(pv: Dict[str, Var], prefix: str, seq: Var) -> Var:
    """Fold the cell over ``seq: (N, L, d_x)`` from the zero state; return ``h_L: (N, d_h)``."""
    if seq.ndim != 3:
        raise ShapeError("lstm_encode", [seq.shape], "expected (N, L, d_x)")
    n, length, d_in = seq.shape
    if length < 1:
        raise ContractError("lstm_encode: empty sequence")
    d_x, d_h = lstm_dims(pv, prefix)
    if d_in != d_x:
        raise ShapeError("lstm_encode", [seq.shape, (d_x,)])
    w = pv[f"{prefix}.W"]
    w_x, w_h = w[0:d_x], w[d_x:]
    # input contribution for every step in one product
    xw = (seq.reshape(n * length, d_x) @ w_x + pv[f"{prefix}.b"]).reshape(n, length, 4 * d_h)
    state = zero_state(seq.tape, n, d_h)
    for t in range(length):
        pre = xw[:, t, :]
        if t > 0:
            pre = pre + state.h @ w_h
        state = _gates(pre, d_h, state)
    return state.h


# ---------------------------------------------------------------------------
# attention


def init_multihead(
    store: ParamStore, prefix: str, d_q: int, d_k: int, d_v: int, d_model: int, d_out: int, rng, heads: int = 8
):
    if d_model % heads:
        raise ShapeError("multihead", [(d_model,), (heads,)], "model dim must be divisible by heads")
    init_linear(store, f"{prefix}.q", d_q, d_model, rng, bias=False)
    init_linear(store, f"{prefix}.k", d_k, d_model, rng, bias=False)
    init_linear(store, f"{prefix}.v", d_v, d_model, rng, bias=False)
    init_linear(store, f"{prefix}.o", d_model, d_out, rng, bias=False)


def _insert_axis(x: Var, pos: int) -> Var:
    shape = list(x.shape)
    shape.insert(pos if pos >= 0 else len(shape) + 1 + pos, 1)
    return x.reshape(tuple(shape))


def attention_weights(kind: str, queries: Var, keys: Var, scale: float = 1.0) -> Var:
    """Row-stochastic weights ``(..., m, n)`` for the parameter-free kinds."""
    m, n = queries.shape[-2], keys.shape[-2]
    if n == 0:
        raise ContractError("attention over zero keys")
    if kind == "uniform":
        lead = np.broadcast_shapes(queries.shape[:-2], keys.shape[:-2])
        return queries.tape.const(np.full(lead + (m, n), 1.0 / n))
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError("attend", [queries.shape, keys.shape], "query/key widths differ")
    if kind == "laplace":
        diff = _insert_axis(queries, -2) - _insert_axis(keys, -3)
        dist = ad.abs_(diff).sum(axis=-1)
        return ad.softmax(dist * (-scale), axis=-1)
    if kind == "dotproduct":
        d_k = queries.shape[-1]
        logits = (queries @ ad.swap_last(keys)) * (1.0 / math.sqrt(d_k))
        return ad.softmax(logits, axis=-1)
    raise ContractError(f"no parameter-free weights for attention kind {kind!r}")


def _split_heads(x: Var, heads: int) -> Var:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    k = len(lead)
    return ad.transpose(x, list(range(k)) + [k + 1, k, k + 2])


def _merge_heads(x: Var) -> Var:
    *lead, heads, n, hd = x.shape
    k = len(lead)
    x = ad.transpose(x, list(range(k)) + [k + 1, k, k + 2])
    return x.reshape(*lead, n, heads * hd)


def attend(
    kind: str,
    queries: Var,
    keys: Var,
    values: Var,
    pv: Optional[Dict[str, Var]] = None,
    prefix: str = "",
    scale: float = 1.0,
    heads: int = 8,
) -> Var:
    """Attend from ``queries (..., m, d_k)`` over ``keys (..., n, d_k)`` / ``values (..., n, d_v)``.

    uniform averages values (NP aggregation); laplace weights by
    ``softmax(-scale * ||q - k||_1)``; dotproduct is scaled dot-product
    attention; multihead runs ``heads`` projected dot-product heads in
    parallel, concatenates, and applies an output projection.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError("attend", [keys.shape, values.shape], "key/value counts differ")
    if keys.shape[-2] == 0:
        raise ContractError("attend: zero keys")
    if kind == "uniform":
        m = queries.shape[-2]
        avg = values.mean(axis=-2, keepdims=True)
        lead = np.broadcast_shapes(queries.shape[:-2], values.shape[:-2])
        return ad.broadcast(avg, lead + (m, values.shape[-1]))
    if kind in ("laplace", "dotproduct"):
        return attention_weights(kind, queries, keys, scale) @ values
    if kind == "multihead":
        if pv is None:
            raise ContractError("multihead attention requires projection parameters")
        d_model = pv[f"{prefix}.q.W"].shape[1]
        if d_model % heads:
            raise ShapeError("multihead", [(d_model,), (heads,)], "head-dim mismatch")
        q = _split_heads(linear(pv, f"{prefix}.q", queries), heads)
        k = _split_heads(linear(pv, f"{prefix}.k", keys), heads)
        v = _split_heads(linear(pv, f"{prefix}.v", values), heads)
        w = attention_weights("dotproduct", q, k)
        return linear(pv, f"{prefix}.o", _merge_heads(w @ v))
    raise ContractError(f"unknown attention kind {kind!r}")


def self_attend(kind: str, reps: Var, pv=None, prefix: str = "", scale: float = 1.0, heads: int = 8) -> Var:
    if reps.shape[-2] < 1:
        raise ContractError("self_attend: empty set")
    return attend(kind, reps, reps, reps, pv, prefix, scale, heads)
