"""Pre-norm transformer encoder with per-layer taps and the classification head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import Engine, Owner, ShapeError, Tensor
from .methods import MethodSpec
from .params import ParamStore

WEIGHT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 128
    seq_len: int = 64
    d_input: int = 12
    n_classes: int = 6
    proj_dim: int = 256
    frontend_context: int = 3
    ln_eps: float = 1e-5

    def __post_init__(self):
        for k in ("n_layers", "d_model", "n_heads", "d_ff", "seq_len", "d_input", "n_classes", "proj_dim", "frontend_context"):
            v = getattr(self, k)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"ModelConfig.{k} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.frontend_context % 2 == 0:
            raise ValueError("frontend_context must be odd")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def whisper_small(cls, n_classes: int = 6) -> "ModelConfig":
        return cls(n_layers=12, d_model=768, n_heads=12, d_ff=3072, seq_len=1500, d_input=80,
                   n_classes=n_classes, proj_dim=256)


@dataclass
class LayerTaps:
    embeddings: Tensor
    per_layer: list[Tensor] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.per_layer[-1]

    def layer(self, i: int) -> Tensor:
        """1-based access: layer(0) is the embeddings, layer(N) the last block."""
        return self.embeddings if i == 0 else self.per_layer[i - 1]


# ---------------------------------------------------------------- init


def fan_in_std(d_in: int) -> float:
    return 1.0 / math.sqrt(d_in)


def _normal(rng, shape, materialize, std=WEIGHT_STD):
    return rng.normal(0.0, std, size=shape) if materialize else shape


def _zeros(shape, materialize):
    return np.zeros(shape) if materialize else shape


def _ones(shape, materialize):
    return np.ones(shape) if materialize else shape


def add_linear(store: ParamStore, rng, prefix: str, d_in: int, d_out: int, *, owner: Owner, group: str,
               zero_weight: bool = False, std: float | None = None) -> None:
    """Weight (d_out, d_in) ~ N(0, std) (default 0.02) or zeros, bias zeros."""
    m = store.materialize
    std = WEIGHT_STD if std is None else std
    w = _zeros((d_out, d_in), m) if zero_weight else _normal(rng, (d_out, d_in), m, std)
    store.add(f"{prefix}.weight", w, owner=owner, role="weight", group=group)
    store.add(f"{prefix}.bias", _zeros((d_out,), m), owner=owner, role="bias", group=group)


def add_layernorm(store: ParamStore, prefix: str, d: int, *, owner: Owner, group: str) -> None:
    m = store.materialize
    store.add(f"{prefix}.gain", _ones((d,), m), owner=owner, role="gain", group=group)
    store.add(f"{prefix}.bias", _zeros((d,), m), owner=owner, role="bias", group=group)


def init_backbone(cfg: ModelConfig, seed: int, *, dtype=np.float64, materialize: bool = True) -> ParamStore:
    """Seeded stand-in for pretrained weights: N(0, 0.02) weights, zero biases, unit gains.

    The two front-end maps use fan-in scaled weights instead (see the stem comment).
    """
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype=dtype, materialize=materialize)
    d, k = cfg.d_model, cfg.frontend_context
    bb = Owner.BACKBONE
    # The stem is variance-preserving: at 0.02 two stacked maps would shrink the input ~50x
    # below the position table and leave the encoder nearly blind to it.
    add_linear(store, rng, "frontend.conv1", k * cfg.d_input, d, owner=bb, group="frontend",
               std=fan_in_std(k * cfg.d_input))
    add_linear(store, rng, "frontend.conv2", k * d, d, owner=bb, group="frontend", std=fan_in_std(k * d))
    store.add("pos.embedding", _normal(rng, (cfg.seq_len, d), materialize), owner=bb, role="embedding", group="pos")
    for i in range(1, cfg.n_layers + 1):
        g = f"layer{i}"
        p = f"layers.{i}"
        add_layernorm(store, f"{p}.ln1", d, owner=bb, group=g)
        for proj in ("q", "k", "v", "o"):
            add_linear(store, rng, f"{p}.attn.{proj}", d, d, owner=bb, group=g)
        add_layernorm(store, f"{p}.ln2", d, owner=bb, group=g)
        add_linear(store, rng, f"{p}.ffn.fc1", d, cfg.d_ff, owner=bb, group=g)
        add_linear(store, rng, f"{p}.ffn.fc2", cfg.d_ff, d, owner=bb, group=g)
    add_layernorm(store, "final_ln", d, owner=bb, group="final_ln")
    return store


def init_head(store: ParamStore, cfg: ModelConfig, seed: int, d_feat: int | None = None, *, zero: bool = False) -> None:
    rng = np.random.default_rng([seed, 7])
    d_feat = cfg.d_model if d_feat is None else d_feat
    add_linear(store, rng, "head.proj", d_feat, cfg.proj_dim, owner=Owner.HEAD, group="head", zero_weight=zero)
    add_linear(store, rng, "head.fc", cfg.proj_dim, cfg.n_classes, owner=Owner.HEAD, group="head", zero_weight=zero)


# ---------------------------------------------------------------- forward


def linear(eng: Engine, x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    y = eng.matmul(x, store[f"{prefix}.weight"], trans_b=True)
    return eng.add(y, store[f"{prefix}.bias"])


def layernorm(eng: Engine, x: Tensor, store: ParamStore, prefix: str, eps: float = 1e-5) -> Tensor:
    return eng.layernorm(x, store[f"{prefix}.gain"], store[f"{prefix}.bias"], eps=eps)


class LayerHooks:
    """Extension points used by the PEFT methods; the defaults are identities."""

    def projection(self, eng: Engine, layer: int, name: str, x: Tensor, out: Tensor) -> Tensor:
        return out

    def sublayer(self, eng: Engine, layer: int, name: str, out: Tensor) -> Tensor:
        return out


NO_HOOKS = LayerHooks()


def frontend(eng: Engine, store: ParamStore, cfg: ModelConfig, x: Tensor) -> Tensor:
    """Two linear frame-context maps (Whisper's two convolutions, by parameter count) plus positions."""
    if x.shape[-1] != cfg.d_input or x.shape[-2] > cfg.seq_len:
        raise ShapeError(f"encode: input {x.shape} does not match d_input={cfg.d_input}, seq_len<={cfg.seq_len}")
    with eng.owner(Owner.BACKBONE, "frontend"):
        h = linear(eng, eng.frame_stack(x, cfg.frontend_context), store, "frontend.conv1")
        h = linear(eng, eng.frame_stack(h, cfg.frontend_context), store, "frontend.conv2")
        return eng.embedding_add(h, store["pos.embedding"])


def _split_heads(eng: Engine, t: Tensor, heads: int) -> Tensor:
    *lead, n, d = t.shape
    t = eng.reshape(t, (*lead, n, heads, d // heads))
    nd = len(lead)
    return eng.transpose(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(eng: Engine, t: Tensor) -> Tensor:
    *lead, h, n, dh = t.shape
    nd = len(lead)
    t = eng.transpose(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return eng.reshape(t, (*lead, n, h * dh))


def self_attention(eng: Engine, store: ParamStore, cfg: ModelConfig, i: int, h: Tensor, hooks: LayerHooks) -> Tensor:
    p = f"layers.{i}.attn"
    q = hooks.projection(eng, i, "q", h, linear(eng, h, store, f"{p}.q"))
    k = hooks.projection(eng, i, "k", h, linear(eng, h, store, f"{p}.k"))
    v = hooks.projection(eng, i, "v", h, linear(eng, h, store, f"{p}.v"))
    q = eng.scale(_split_heads(eng, q, cfg.n_heads), 1.0 / math.sqrt(cfg.head_dim))
    k = _split_heads(eng, k, cfg.n_heads)
    v = _split_heads(eng, v, cfg.n_heads)
    probs = eng.softmax_rows(eng.matmul(q, k, trans_b=True))
    o = _merge_heads(eng, eng.matmul(probs, v))
    return linear(eng, o, store, f"{p}.o")


def encoder_layer(eng: Engine, store: ParamStore, cfg: ModelConfig, i: int, x: Tensor,
                  hooks: LayerHooks = NO_HOOKS) -> Tensor:
    """y = x + MHSA(LN(x)); z = y + FFN(LN(y)), GELU inside the FFN."""
    p = f"layers.{i}"
    with eng.owner(Owner.BACKBONE, f"layer{i}"):
        a = self_attention(eng, store, cfg, i, layernorm(eng, x, store, f"{p}.ln1", cfg.ln_eps), hooks)
        y = eng.add(x, hooks.sublayer(eng, i, "attn", a))
        f = linear(eng, layernorm(eng, y, store, f"{p}.ln2", cfg.ln_eps), store, f"{p}.ffn.fc1")
        f = linear(eng, eng.gelu(f), store, f"{p}.ffn.fc2")
        return eng.add(y, hooks.sublayer(eng, i, "ffn", f))


def encode(eng: Engine, store: ParamStore, cfg: ModelConfig, x: Tensor, retain: bool = True, *,
           hooks: LayerHooks = NO_HOOKS, upto: int | None = None) -> LayerTaps:
    """Run the front-end and layers 1..upto (default all); with retain=False nothing reaches the tape."""
    upto = cfg.n_layers if upto is None else upto
    if not retain:
        with eng.detached_scope():
            return encode(eng, store, cfg, x, True, hooks=hooks, upto=upto)
    h = frontend(eng, store, cfg, x)
    taps = LayerTaps(h)
    for i in range(1, upto + 1):
        h = encoder_layer(eng, store, cfg, i, h, hooks)
        taps.per_layer.append(h)
    return taps


def final_norm(eng: Engine, store: ParamStore, cfg: ModelConfig, x: Tensor) -> Tensor:
    with eng.owner(Owner.BACKBONE, "final_ln"):
        return layernorm(eng, x, store, "final_ln", cfg.ln_eps)


def classify_head(eng: Engine, store: ParamStore, features: Tensor) -> Tensor:
    """logits = FC(mean_t(Proj(features)))."""
    width = store["head.proj.weight"].shape[1]
    if features.shape[-1] != width:
        raise ShapeError(f"classify_head: features have width {features.shape[-1]}, head expects {width}")
    with eng.owner(Owner.HEAD, "head"):
        z = linear(eng, features, store, "head.proj")
        pooled = eng.mean(z, axis=-2)
        if pooled.data.ndim == 1:
            pooled = eng.reshape(pooled, (1, pooled.shape[0]))
            return eng.reshape(linear(eng, pooled, store, "head.fc"), (store["head.fc.bias"].shape[0],))
        return linear(eng, pooled, store, "head.fc")


# ---------------------------------------------------------------- freezing


def freeze_policy(store: ParamStore, method: MethodSpec) -> None:
    """Set frozen flags for a method; the head is trainable under every method.

    The front-end and positional table stay frozen everywhere.
    """
    method = MethodSpec.parse(method)
    kind = method.kind
    for name, e in store.items():
        if e.group == "head":
            trainable = True
        elif e.group in ("frontend", "pos"):
            trainable = False
        elif kind == "vanilla":
            trainable = e.group != "method"
        elif kind == "head":
            trainable = False
        elif kind == "bitfit":
            trainable = e.role == "bias" and e.group != "method"
        else:
            trainable = e.group == "method"
        store.set_frozen(name, not trainable)
