"""Closed-form parameter, memory and backward-FLOP estimates.

Counts follow the engine's retention rule table and FLOP rule op by op, but
are derived from shapes alone, so they work at Whisper-small scale without
allocating anything. Activation bytes scale linearly with batch except for
a few scalar gate buffers that are shared across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..backbone import ModelConfig
from ..engine import _FLOPS_PER_ELEMENT as FPE
from ..meft import lst_hidden, side_width
from ..methods import MethodSpec
from ..peft import LORA_TARGETS


@dataclass(frozen=True)
class CostEstimate:
    total_params: int
    trainable_params: int
    param_bytes: int
    grad_bytes: int
    optimizer_bytes: int
    retained_activation_bytes_est: int
    retained_bytes_per_sample: int
    backward_flops: int
    batch: int
    itemsize: int

    @property
    def trainable_ratio(self) -> float:
        return 100.0 * self.trainable_params / self.total_params

    @property
    def total_footprint(self) -> int:
        return self.param_bytes + self.grad_bytes + self.optimizer_bytes + self.retained_activation_bytes_est


# ---------------------------------------------------------------- parameters


def _linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _adapter_params(d: int, dim: int) -> int:
    return 2 * d + _linear_params(d, dim) + _linear_params(dim, d)


def backbone_param_counts(cfg: ModelConfig) -> dict[str, int]:
    d, f, k = cfg.d_model, cfg.d_ff, cfg.frontend_context
    layer_weights = 4 * d * d + 2 * d * f
    layer_biases = 4 * d + f + d + 2 * d  # projections, FFN, LN biases
    layer_gains = 2 * d
    return {
        "frontend": _linear_params(k * cfg.d_input, d) + _linear_params(k * d, d),
        "pos": cfg.seq_len * d,
        "layer_weights": cfg.n_layers * layer_weights,
        "layer_biases": cfg.n_layers * layer_biases,
        "layer_gains": cfg.n_layers * layer_gains,
        "final_ln_gain": d,
        "final_ln_bias": d,
        "head": _linear_params(d, cfg.proj_dim) + _linear_params(cfg.proj_dim, cfg.n_classes),
    }


def method_param_count(cfg: ModelConfig, method: MethodSpec) -> int:
    d, N = cfg.d_model, cfg.n_layers
    kind = method.kind
    if kind == "adapter":
        return 2 * N * _adapter_params(d, method.dim)
    if kind == "lora":
        return N * len(LORA_TARGETS) * 2 * d * method.r
    if kind == "adalora":
        return N * len(LORA_TARGETS) * (2 * d * method.init_r + method.init_r)
    if kind == "lst":
        ds, hs = side_width(cfg, method.rf), lst_hidden(cfg, method)
        return (N + 1) * _linear_params(d, ds) + N * (_adapter_params(ds, hs) + 1) + _linear_params(ds, d)
    if kind == "unipt":
        ds = side_width(cfg, method.rf)
        return N * _linear_params(d, ds) + _linear_params(ds, 1) + _linear_params(ds, d)
    if kind == "sherl":
        ds = side_width(cfg, method.rf)
        return ((N - 2) * _linear_params(d, ds) + _linear_params(d, ds) + _linear_params(ds, ds)
                + _linear_params(ds, d) + 1)
    return 0


def param_census(cfg: ModelConfig, method: MethodSpec) -> tuple[int, int]:
    """(total, trainable) parameter counts."""
    c = backbone_param_counts(cfg)
    extra = method_param_count(cfg, method)
    total = sum(c.values()) + extra
    kind = method.kind
    if kind == "vanilla":
        trainable = total - c["frontend"] - c["pos"]
    elif kind == "head":
        trainable = c["head"]
    elif kind == "bitfit":
        trainable = c["layer_biases"] + c["final_ln_bias"] + c["head"]
    else:
        trainable = extra + c["head"]
    return total, trainable


# ---------------------------------------------------------------- activations


class _Tally:
    """Accumulates retained elements (per sample and shared), mask bytes and FLOPs."""

    def __init__(self):
        self.elems = 0
        self.shared = 0
        self.mask_bytes = 0
        self.flops = 0
        self.shared_flops = 0

    # each helper returns whether its output is on the gradient path

    def linear(self, rows, d_in, d_out, x_on, w_tr, b_tr) -> bool:
        mm_on = x_on or w_tr
        if mm_on:
            if w_tr:
                self.elems += rows * d_in
            self.flops += 2 * rows * d_out * d_in * (x_on + w_tr)
        if mm_on or b_tr:
            self.flops += FPE["add"] * rows * d_out * (mm_on + b_tr)
        return mm_on or b_tr

    def layernorm(self, rows, d, x_on, g_tr, b_tr) -> bool:
        if x_on or g_tr:
            self.elems += rows * d
        if x_on:
            self.elems += rows
        self.flops += FPE["layernorm"] * rows * d * (x_on + g_tr + b_tr)
        return x_on or g_tr or b_tr

    def matmul(self, a_elems, b_elems, out_elems, inner, a_on, b_on) -> bool:
        """Pass 0 for the element count of a parameter operand: parameters are never counted."""
        if a_on:
            self.elems += b_elems
        if b_on:
            self.elems += a_elems
        self.flops += 2 * out_elems * inner * (a_on + b_on)
        return a_on or b_on

    def add(self, elems, a_on, b_on) -> bool:
        self.flops += FPE["add"] * elems * (a_on + b_on)
        return a_on or b_on

    def unary(self, kind, elems, on, keep=True) -> bool:
        if on:
            if kind == "relu":
                self.mask_bytes += elems
            elif keep:
                self.elems += elems
            self.flops += FPE[kind] * elems
        return on


def _adapter_site(t: _Tally, rows, d, dim, x_on) -> bool:
    h = t.layernorm(rows, d, x_on, True, True)
    h = t.linear(rows, d, dim, h, True, True)
    h = t.unary("relu", rows * dim, h)
    h = t.linear(rows, dim, d, h, True, True)
    return t.add(rows * d, x_on, h)


def _lora_site(t: _Tally, rows, d, r, x_on, out_on) -> bool:
    z = t.matmul(rows * d, 0, rows * r, d, x_on, True)
    z = t.matmul(rows * r, 0, rows * d, r, z, True)
    return t.add(rows * d, out_on, z)


def _adalora_site(t: _Tally, rows, d, r, x_on, out_on) -> bool:
    z = t.matmul(rows * d, 0, rows * r, d, x_on, True)
    # mul by the diagonal: the vector is a parameter, only the activation counts
    t.elems += rows * r
    t.flops += FPE["mul"] * rows * r * 2
    z = t.matmul(rows * r, 0, rows * d, r, True, True)
    return t.add(rows * d, out_on, z)


def _encoder_layer(t: _Tally, cfg: ModelConfig, method: MethodSpec, x_on: bool, tr_w: bool, tr_b: bool,
                   tr_g: bool) -> bool:
    n, d, h, f = cfg.seq_len, cfg.d_model, cfg.n_heads, cfg.d_ff
    kind = method.kind
    h1 = t.layernorm(n, d, x_on, tr_g, tr_b)
    on = {}
    for p in ("q", "k", "v"):
        out = t.linear(n, d, d, h1, tr_w, tr_b)
        if kind == "lora" and p in LORA_TARGETS:
            out = _lora_site(t, n, d, method.r, h1, out)
        elif kind == "adalora" and p in LORA_TARGETS:
            out = _adalora_site(t, n, d, method.init_r, h1, out)
        on[p] = out
    t.unary("scale", n * d, on["q"], keep=False)
    s_on = t.matmul(n * d, n * d, h * n * n, d // h, on["q"], on["k"])
    s_on = t.unary("softmax-rows", h * n * n, s_on)
    a_on = t.matmul(h * n * n, n * d, n * d, n, s_on, on["v"])
    o_on = t.linear(n, d, d, a_on, tr_w, tr_b)
    if kind == "adapter":
        o_on = _adapter_site(t, n, d, method.dim, o_on)
    y_on = t.add(n * d, x_on, o_on)
    h2 = t.layernorm(n, d, y_on, tr_g, tr_b)
    f1 = t.linear(n, d, f, h2, tr_w, tr_b)
    g = t.unary("gelu", n * f, f1)
    f2 = t.linear(n, f, d, g, tr_w, tr_b)
    if kind == "adapter":
        f2 = _adapter_site(t, n, d, method.dim, f2)
    return t.add(n * d, y_on, f2)


def _head(t: _Tally, cfg: ModelConfig, d_feat: int, x_on: bool) -> None:
    n, P, K = cfg.seq_len, cfg.proj_dim, cfg.n_classes
    z = t.linear(n, d_feat, P, x_on, True, True)
    t.unary("mean-over-axis", n * P, z, keep=False)
    t.linear(1, P, K, True, True, True)
    t.unary("cross-entropy-with-logits", K, True)


def _gate(t: _Tally, elems: int, f_on: bool, g_on: bool) -> None:
    # sigmoid(alpha / T) and (1 - mu) are batch-shared scalars
    t.shared_flops += FPE["scale"] + FPE["sigmoid"] + FPE["scale"] + FPE["add"]
    t.shared += 1  # sigmoid output
    for other_on in (f_on, g_on):
        t.shared += 1  # mu or (1 - mu) kept for the activation's grad when it is on the path
        if not other_on:
            t.shared -= 1
        t.elems += elems  # activation kept for the gate's grad
        t.flops += FPE["mul"] * elems * (other_on + 1)
    t.flops += FPE["add"] * elems * 2


def _activation_tally(cfg: ModelConfig, method: MethodSpec) -> _Tally:
    t = _Tally()
    n, d, N = cfg.seq_len, cfg.d_model, cfg.n_layers
    kind = method.kind
    if kind == "head":
        _head(t, cfg, d, False)
    elif kind in ("vanilla", "bitfit", "adapter", "lora", "adalora"):
        tr_w = tr_g = kind == "vanilla"
        tr_b = kind in ("vanilla", "bitfit")
        x_on = False
        for _ in range(N):
            x_on = _encoder_layer(t, cfg, method, x_on, tr_w, tr_b, tr_g)
        x_on = t.layernorm(n, d, x_on, tr_g, tr_b)
        _head(t, cfg, d, x_on)
    elif kind == "lst":
        ds, hs = side_width(cfg, method.rf), lst_hidden(cfg, method)
        t.linear(n, d, ds, False, True, True)
        for _ in range(N):
            t.linear(n, d, ds, False, True, True)
            _gate(t, n * ds, True, True)
            _adapter_site(t, n, ds, hs, True)
        t.linear(n, ds, d, True, True, True)
        _head(t, cfg, d, True)
    elif kind == "unipt":
        ds = side_width(cfg, method.rf)
        for _ in range(N):
            e = t.linear(n, d, ds, False, True, True)
            t.unary("relu", n * ds, e)
            c = t.linear(n, ds, 1, True, True, True)
            t.unary("mean-over-axis", n, c, keep=False)
        t.unary("softmax-rows", N, True)
        t.matmul(N, N * n * ds, n * ds, N, True, True)
        t.linear(n, ds, d, True, True, True)
        _head(t, cfg, d, True)
    elif kind == "sherl":
        ds = side_width(cfg, method.rf)
        m = (N - 2) * n
        for _ in range(N - 2):
            s = t.linear(n, d, ds, False, True, True)
            t.elems += 1  # per-sample (1 - rho) factor kept for the projection's grad
            t.flops += FPE["mul"] * n * ds
        q = t.linear(n, d, ds, False, True, True)
        t.unary("scale", n * ds, q, keep=False)
        k = t.linear(m, ds, ds, True, True, True)
        p = t.matmul(n * ds, m * ds, n * m, ds, True, k)
        p = t.unary("softmax-rows", n * m, p)
        a = t.matmul(n * m, m * ds, n * ds, m, p, True)
        t.linear(n, ds, d, a, True, True)
        _gate(t, n * d, True, False)
        x_on = _encoder_layer(t, cfg, MethodSpec("vanilla"), True, False, False, False)
        _head(t, cfg, d, x_on)
    else:
        raise ValueError(f"no cost model for {kind!r}")
    return t


def _adalora_penalty(t: _Tally, cfg: ModelConfig, r: int) -> None:
    d = cfg.d_model
    sites = cfg.n_layers * len(LORA_TARGETS)
    for i in range(sites):
        # P^T P: the transposed view is an activation, P itself a parameter
        t.shared += d * r
        t.flops += 2 * r * r * d * 2
        # Q Q^T: both operands are parameters
        t.flops += 2 * r * r * d * 2
        for _ in range(2):
            t.flops += FPE["add"] * r * r
            t.shared += 2 * r * r
            t.flops += FPE["mul"] * r * r * 2
            t.flops += FPE["mean-over-axis"] * (r * r + r) + FPE["scale"]
        t.flops += FPE["add"] * 2 * (2 if i else 1)
    t.flops += FPE["scale"] + FPE["add"] * 2


def cost_model(cfg: ModelConfig, method, batch: int = 1, itemsize: int = 4) -> CostEstimate:
    """Parameter census, activation retention and backward work for one training step."""
    method = MethodSpec.parse(method)
    total, trainable = param_census(cfg, method)
    t = _activation_tally(cfg, method)
    per_sample = t.elems * itemsize + t.mask_bytes
    if method.kind == "adalora":
        pen = _Tally()
        _adalora_penalty(pen, cfg, method.init_r)
        t.shared += pen.shared
        t.shared_flops += pen.flops
    retained = per_sample * batch + t.shared * itemsize
    return CostEstimate(
        total_params=total,
        trainable_params=trainable,
        param_bytes=total * itemsize,
        grad_bytes=trainable * itemsize,
        optimizer_bytes=2 * trainable * itemsize,
        retained_activation_bytes_est=retained,
        retained_bytes_per_sample=per_sample,
        backward_flops=t.flops * batch + t.shared_flops,
        batch=batch,
        itemsize=itemsize,
    )
