"""Memory-efficient fine-tuning: LST, UniPT and SHERL side structures.

The backbone runs detached; its taps re-enter the tape as constants, so only
side parameters, the head and (for SHERL) the last encoder layer are ever
visited by backward.
"""

from __future__ import annotations

import math

import numpy as np

from .backbone import LayerTaps, ModelConfig, add_linear, encoder_layer, fan_in_std, linear
from .engine import Engine, Owner, ShapeError, Tensor
from .methods import MethodSpec
from .params import ParamStore
from .peft import add_adapter, adapter_forward

GATE_TEMPERATURE = 0.1


def side_width(cfg: ModelConfig, rf: int) -> int:
    if rf <= 0 or cfg.d_model % rf:
        raise ShapeError(f"reduction factor {rf} does not divide d_model={cfg.d_model}")
    return cfg.d_model // rf


def lst_hidden(cfg: ModelConfig, method: MethodSpec) -> int:
    if method.side_hidden is not None:
        return method.side_hidden
    if cfg.d_model == 768:
        return 256
    return max(1, side_width(cfg, method.rf) // 2)


def gate_combine(eng: Engine, alpha: Tensor, h_f: Tensor, h_g: Tensor, T: float = GATE_TEMPERATURE) -> Tensor:
    """mu * h_f + (1 - mu) * h_g with mu = sigmoid(alpha / T)."""
    if h_f.shape != h_g.shape:
        raise ShapeError(f"gate_combine: shapes {h_f.shape} and {h_g.shape} differ")
    if T <= 0:
        raise ValueError("gate temperature must be positive")
    mu = eng.sigmoid(eng.scale(alpha, 1.0 / T))
    one_minus = eng.add(eng.const(np.ones(mu.shape)), eng.scale(mu, -1.0))
    return eng.add(eng.mul(h_f, mu), eng.mul(h_g, one_minus))


# ---------------------------------------------------------------- LST


def _side_linear(store: ParamStore, rng, prefix: str, d_in: int, d_out: int) -> None:
    # Side weights start at fan-in scale; at 0.02 the products of several small
    # side matrices give second-order gradients below Adam's epsilon.
    add_linear(store, rng, prefix, d_in, d_out, owner=Owner.SIDE, group="method", std=fan_in_std(d_in))


def add_lst(store: ParamStore, cfg: ModelConfig, method: MethodSpec, rng) -> None:
    ds = side_width(cfg, method.rf)
    hs = lst_hidden(cfg, method)
    m = store.materialize
    for i in range(cfg.n_layers + 1):
        _side_linear(store, rng, f"lst.down.{i}", cfg.d_model, ds)
    for i in range(1, cfg.n_layers + 1):
        add_adapter(store, rng, f"lst.block.{i}", ds, hs)
        store.add(f"lst.gate.{i}", np.zeros(1) if m else (1,), owner=Owner.SIDE, role="scalar", group="method")
    _side_linear(store, rng, "lst.up", ds, cfg.d_model)


def lst_forward(eng: Engine, store: ParamStore, cfg: ModelConfig, taps: LayerTaps) -> Tensor:
    """Ladder of bottleneck blocks fed by downsampled taps; returns g_N at side width."""
    if len(taps.per_layer) != cfg.n_layers:
        raise ShapeError(f"lst_forward: expected {cfg.n_layers} taps, got {len(taps.per_layer)}")
    with eng.owner(Owner.SIDE, "lst"):
        g = linear(eng, taps.embeddings, store, "lst.down.0")
        for i in range(1, cfg.n_layers + 1):
            h_f = linear(eng, taps.layer(i), store, f"lst.down.{i}")
            g = adapter_forward(eng, store, f"lst.block.{i}", gate_combine(eng, store[f"lst.gate.{i}"], h_f, g),
                                cfg.ln_eps)
        return g


# ---------------------------------------------------------------- UniPT


def add_unipt(store: ParamStore, cfg: ModelConfig, method: MethodSpec, rng) -> None:
    ds = side_width(cfg, method.rf)
    for i in range(1, cfg.n_layers + 1):
        _side_linear(store, rng, f"unipt.proj.{i}", cfg.d_model, ds)
    _side_linear(store, rng, "unipt.conf", ds, 1)
    _side_linear(store, rng, "unipt.up", ds, cfg.d_model)


def unipt_interact(eng: Engine, F_i: Tensor, F_N: Tensor) -> Tensor:
    """(rownorm_L1(ReLU(F_N F_i^T)) + I) F_i; all-zero attention rows pass F_i through."""
    if F_i.shape != F_N.shape:
        raise ShapeError(f"unipt_interact: shapes {F_i.shape} and {F_N.shape} differ")
    attn = eng.l1_normalize_rows(eng.relu(eng.matmul(F_N, F_i, trans_b=True)))
    return eng.add(eng.matmul(attn, F_i), F_i)


def confidence_mix(eng: Engine, feats: list[Tensor], scores: list[Tensor]) -> Tensor:
    """sum_i softmax(scores)_i * feats_i; scores have shape (..., 1)."""
    *lead, n, d = feats[0].shape
    L = len(feats)
    c = eng.concat_rows([eng.reshape(s, (*lead, 1, 1)) for s in scores])
    w = eng.softmax_rows(eng.reshape(c, (*lead, 1, L)))
    stacked = eng.concat_rows([eng.reshape(f, (*lead, 1, n * d)) for f in feats])
    return eng.reshape(eng.matmul(w, stacked), (*lead, n, d))


def unipt_aggregate(eng: Engine, store: ParamStore, cfg: ModelConfig, taps: LayerTaps) -> Tensor:
    F_N = taps.final
    with eng.owner(Owner.SIDE, "unipt"):
        feats, scores = [], []
        for i in range(1, cfg.n_layers + 1):
            inter = unipt_interact(eng, taps.layer(i), F_N)
            E = eng.relu(linear(eng, inter, store, f"unipt.proj.{i}"))
            feats.append(E)
            scores.append(eng.mean(linear(eng, E, store, "unipt.conf"), axis=-2))
        return confidence_mix(eng, feats, scores)


# ---------------------------------------------------------------- SHERL


def add_sherl(store: ParamStore, cfg: ModelConfig, method: MethodSpec, rng) -> None:
    if cfg.n_layers < 3:
        raise ShapeError(f"SHERL needs at least 3 layers, got {cfg.n_layers}")
    ds = side_width(cfg, method.rf)
    m = store.materialize
    for i in range(1, cfg.n_layers - 1):
        _side_linear(store, rng, f"sherl.proj.{i}", cfg.d_model, ds)
    _side_linear(store, rng, "sherl.q", cfg.d_model, ds)
    _side_linear(store, rng, "sherl.k", ds, ds)
    _side_linear(store, rng, "sherl.o", ds, cfg.d_model)
    store.add("sherl.gate", np.zeros(1) if m else (1,), owner=Owner.SIDE, role="scalar", group="method")


def sherl_redundancy(eng: Engine, taps: LayerTaps, n_layers: int | None = None) -> np.ndarray:
    """Per shallow layer: mean positive cosine between its time-pooled tap and the others'.

    Returns an array of shape (..., N-2) with values in [0, 1].
    """
    N = len(taps.per_layer) if n_layers is None else n_layers
    if N < 3:
        raise ShapeError(f"sherl_redundancy: need N >= 3 layers, got {N}")
    m = N - 2
    with eng.detached_scope():
        pooled = [eng.mean(taps.layer(i), axis=-2) for i in range(1, m + 1)]
        cos = [[None] * m for _ in range(m)]
        for i in range(m):
            for j in range(i + 1, m):
                cos[i][j] = cos[j][i] = np.maximum(eng.cosine_rows(pooled[i], pooled[j]).data, 0)
    lead = pooled[0].shape[:-1]
    rho = np.zeros(lead + (m,), dtype=pooled[0].data.dtype)
    if m == 1:
        return rho
    for i in range(m):
        rho[..., i] = sum(cos[i][j] for j in range(m) if j != i) / (m - 1)
    return rho


def sherl_forward(eng: Engine, store: ParamStore, cfg: ModelConfig, taps: LayerTaps,
                  rho: np.ndarray | None = None) -> Tensor:
    """Redundancy-weighted early aggregation, gated into tap N-1, then frozen layer N."""
    N = cfg.n_layers
    if len(taps.per_layer) < N - 1:
        raise ShapeError(f"sherl_forward: need taps for layers 1..{N - 1}")
    if rho is None:
        rho = sherl_redundancy(eng, taps, N)
    guide = taps.layer(N - 1)
    with eng.owner(Owner.SIDE, "sherl"):
        shallow = []
        for i in range(1, N - 1):
            keep = eng.const(1.0 - rho[..., i - 1])
            keep = eng.reshape(keep, keep.shape + (1, 1))
            shallow.append(eng.mul(linear(eng, taps.layer(i), store, f"sherl.proj.{i}"), keep))
        kv = eng.concat_rows(shallow)
        ds = kv.shape[-1]
        q = eng.scale(linear(eng, guide, store, "sherl.q"), 1.0 / math.sqrt(ds))
        k = linear(eng, kv, store, "sherl.k")
        att = eng.matmul(eng.softmax_rows(eng.matmul(q, k, trans_b=True)), kv)
        early = linear(eng, att, store, "sherl.o")
        combined = gate_combine(eng, store["sherl.gate"], early, guide)
    return encoder_layer(eng, store, cfg, N, combined)


def add_meft_params(store: ParamStore, cfg: ModelConfig, method: MethodSpec, seed: int) -> None:
    rng = np.random.default_rng([seed, 13])
    {"lst": add_lst, "unipt": add_unipt, "sherl": add_sherl}[method.kind](store, cfg, method, rng)
