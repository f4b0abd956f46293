"""PEFT baselines wired into the frozen backbone: Adapter, LoRA, AdaLoRA-lite, BitFit.

All method parameters live in the ParamStore under group ``method`` with
owner SIDE, so the backbone/side split in backward statistics stays exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import LayerHooks, ModelConfig, add_layernorm, add_linear, fan_in_std, freeze_policy, layernorm, linear
from .engine import Engine, Owner, ShapeError, Tensor
from .methods import MethodSpec
from .params import ParamStore

LORA_TARGETS = ("q", "v")
ADAPTER_SITES = ("attn", "ffn")


# ---------------------------------------------------------------- adapters


def add_adapter(store: ParamStore, rng, prefix: str, d: int, dim: int) -> None:
    """LN -> down(d->dim) -> ReLU -> up(dim->d), up zero-initialised."""
    add_layernorm(store, f"{prefix}.ln", d, owner=Owner.SIDE, group="method")
    add_linear(store, rng, f"{prefix}.down", d, dim, owner=Owner.SIDE, group="method", std=fan_in_std(d))
    add_linear(store, rng, f"{prefix}.up", dim, d, owner=Owner.SIDE, group="method", zero_weight=True)


def adapter_forward(eng: Engine, store: ParamStore, prefix: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    d = store[f"{prefix}.up.weight"].shape[0]
    if x.shape[-1] != d:
        raise ShapeError(f"adapter_forward: input width {x.shape[-1]} != adapter width {d}")
    h = linear(eng, layernorm(eng, x, store, f"{prefix}.ln", eps), store, f"{prefix}.down")
    return eng.add(x, linear(eng, eng.relu(h), store, f"{prefix}.up"))


class AdapterHooks(LayerHooks):
    def __init__(self, store: ParamStore, eps: float = 1e-5):
        self.store = store
        self.eps = eps

    def sublayer(self, eng, layer, name, out):
        with eng.owner(Owner.SIDE):
            return adapter_forward(eng, self.store, f"adapters.{layer}.{name}", out, self.eps)


# ---------------------------------------------------------------- LoRA


def add_lora(store: ParamStore, rng, prefix: str, d_in: int, d_out: int, r: int) -> None:
    if r <= 0:
        raise ValueError(f"LoRA rank must be positive, got {r}")
    a = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(r, d_in)) if store.materialize else (r, d_in)
    b = np.zeros((d_out, r)) if store.materialize else (d_out, r)
    store.add(f"{prefix}.A", a, owner=Owner.SIDE, role="weight", group="method")
    store.add(f"{prefix}.B", b, owner=Owner.SIDE, role="weight", group="method")


def lora_delta(eng: Engine, x: Tensor, A: Tensor, B: Tensor, scaling: float = 1.0) -> Tensor:
    if A.shape[0] <= 0 or A.shape[0] != B.shape[1]:
        raise ShapeError(f"lora: A {A.shape} and B {B.shape} disagree on rank")
    d = eng.matmul(eng.matmul(x, A, trans_b=True), B, trans_b=True)
    return d if scaling == 1.0 else eng.scale(d, scaling)


def lora_forward(eng: Engine, weight: Tensor, A: Tensor, B: Tensor, x: Tensor, scaling: float = 1.0,
                 bias: Tensor | None = None) -> Tensor:
    """y = x W^T (+ b) + scaling * (x A^T) B^T."""
    y = eng.matmul(x, weight, trans_b=True)
    if bias is not None:
        y = eng.add(y, bias)
    with eng.owner(Owner.SIDE):
        return eng.add(y, lora_delta(eng, x, A, B, scaling))


class LoraHooks(LayerHooks):
    def __init__(self, store: ParamStore, r: int, alpha: float | None = None, targets=LORA_TARGETS):
        self.store = store
        self.scaling = (r if alpha is None else alpha) / r
        self.targets = targets

    def projection(self, eng, layer, name, x, out):
        if name not in self.targets:
            return out
        p = f"lora.{layer}.{name}"
        with eng.owner(Owner.SIDE):
            return eng.add(out, lora_delta(eng, x, self.store[f"{p}.A"], self.store[f"{p}.B"], self.scaling))


# ---------------------------------------------------------------- AdaLoRA-lite


def add_adalora(store: ParamStore, rng, prefix: str, d: int, r: int) -> None:
    m = store.materialize
    store.add(f"{prefix}.P", rng.normal(0.0, 0.02, size=(d, r)) if m else (d, r),
              owner=Owner.SIDE, role="weight", group="method")
    store.add(f"{prefix}.lam", np.zeros(r) if m else (r,), owner=Owner.SIDE, role="scalar", group="method")
    store.add(f"{prefix}.Q", rng.normal(0.0, 0.02, size=(r, d)) if m else (r, d),
              owner=Owner.SIDE, role="weight", group="method")


def adalora_delta(eng: Engine, x: Tensor, P: Tensor, lam: Tensor, Q: Tensor, scaling: float = 1.0) -> Tensor:
    """x Q^T diag(lam) P^T: the SVD-shaped update P diag(lam) Q."""
    z = eng.mul(eng.matmul(x, Q, trans_b=True), lam)
    d = eng.matmul(z, P, trans_b=True)
    return d if scaling == 1.0 else eng.scale(d, scaling)


def budget_schedule(step: int, init_r: int, total_steps: int, decay_frac: float = 0.6) -> int:
    """Active rank at ``step``: cubic decay init_r -> init_r/2 over the first 60% of training."""
    target = max(1, init_r // 2)
    decay_end = decay_frac * total_steps
    if step <= 0 or decay_end <= 0:
        return init_r if step <= 0 else target
    if step >= decay_end:
        return target
    frac = 1.0 - step / decay_end
    return int(math.ceil(target + (init_r - target) * frac ** 3 - 1e-12))


@dataclass
class AdaLoraState:
    prefix: str
    r: int
    importance: np.ndarray = field(default=None)
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.importance is None:
            self.importance = np.zeros(self.r)
        if self.mask is None:
            self.mask = np.ones(self.r, dtype=bool)

    @property
    def active_rank(self) -> int:
        return int(self.mask.sum())


class AdaLoraController:
    """Importance smoothing, budget masking and the orthogonality penalty.

    The budget is pooled across all adapted matrices: at each masking step the
    globally most important singular values survive, ``schedule * n_matrices``
    in total. Once masked, a value stays masked.
    """

    def __init__(self, store: ParamStore, init_r: int, total_steps: int, *, beta: float = 0.85,
                 t_mask: int = 50, orth_weight: float = 0.1):
        self.store = store
        self.init_r = init_r
        self.total_steps = max(1, total_steps)
        self.beta = beta
        self.t_mask = t_mask
        self.orth_weight = orth_weight
        prefixes = sorted({n.rsplit(".", 1)[0] for n in store.names(prefix="adalora.")},
                          key=lambda p: (int(p.split(".")[1]), p))
        self.states = [AdaLoraState(p, init_r) for p in prefixes]

    def schedule(self, step: int) -> int:
        return budget_schedule(step, self.init_r, self.total_steps)

    def penalty(self, eng: Engine) -> Tensor | None:
        """orth_weight * sum over matrices of ||P^T P - I||_F^2 + ||Q Q^T - I||_F^2."""
        if self.orth_weight == 0 or not self.states:
            return None
        total = None
        eye = eng.const(np.eye(self.init_r))
        with eng.owner(Owner.SIDE, "adalora"):
            for st in self.states:
                P = self.store[f"{st.prefix}.P"]
                Q = self.store[f"{st.prefix}.Q"]
                for gram in (eng.matmul(eng.transpose(P), P), eng.matmul(Q, Q, trans_b=True)):
                    diff = eng.sub(gram, eye)
                    term = eng.total(eng.mul(diff, diff))
                    total = term if total is None else eng.add(total, term)
            return eng.scale(total, self.orth_weight)

    def update_importance(self) -> None:
        for st in self.states:
            e = self.store.entry(f"{st.prefix}.lam")
            score = np.abs(e.value.data * e.grad)
            st.importance = self.beta * st.importance + (1 - self.beta) * score

    def apply_mask(self) -> None:
        for st in self.states:
            lam = self.store[f"{st.prefix}.lam"].data
            lam[~st.mask] = 0

    def reallocate(self, step: int) -> None:
        budget = self.schedule(step) * len(self.states)
        cands = [(-st.importance[j], si, j) for si, st in enumerate(self.states) for j in range(st.r) if st.mask[j]]
        if len(cands) <= budget:
            return
        cands.sort()
        for _, si, j in cands[budget:]:
            self.states[si].mask[j] = False
        self.apply_mask()

    def step(self, step: int) -> None:
        """Call after backward (grads present) and before the optimizer update."""
        self.update_importance()
        if step > 0 and step % self.t_mask == 0:
            self.reallocate(step)

    def active_ranks(self) -> list[int]:
        return [st.active_rank for st in self.states]


class AdaLoraHooks(LayerHooks):
    def __init__(self, store: ParamStore, targets=LORA_TARGETS):
        self.store = store
        self.targets = targets

    def projection(self, eng, layer, name, x, out):
        if name not in self.targets:
            return out
        p = f"adalora.{layer}.{name}"
        s = self.store
        with eng.owner(Owner.SIDE):
            return eng.add(out, adalora_delta(eng, x, s[f"{p}.P"], s[f"{p}.lam"], s[f"{p}.Q"]))


# ---------------------------------------------------------------- BitFit


def bitfit_select(store: ParamStore) -> None:
    """Train every backbone bias (front-end excluded) plus the head."""
    freeze_policy(store, MethodSpec("bitfit"))


# ---------------------------------------------------------------- assembly


def add_peft_params(store: ParamStore, cfg: ModelConfig, method: MethodSpec, seed: int) -> LayerHooks:
    rng = np.random.default_rng([seed, 11])
    d = cfg.d_model
    if method.kind == "adapter":
        for i in range(1, cfg.n_layers + 1):
            for site in ADAPTER_SITES:
                add_adapter(store, rng, f"adapters.{i}.{site}", d, method.dim)
        return AdapterHooks(store, cfg.ln_eps)
    if method.kind == "lora":
        for i in range(1, cfg.n_layers + 1):
            for t in LORA_TARGETS:
                add_lora(store, rng, f"lora.{i}.{t}", d, d, method.r)
        return LoraHooks(store, method.r)
    if method.kind == "adalora":
        for i in range(1, cfg.n_layers + 1):
            for t in LORA_TARGETS:
                add_adalora(store, rng, f"adalora.{i}.{t}", d, method.init_r)
        return AdaLoraHooks(store)
    if method.kind == "bitfit":
        return LayerHooks()
    raise ValueError(f"{method.kind} is not a PEFT method")
