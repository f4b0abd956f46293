"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backbone import ModelConfig, encode, init_backbone
from .engine import Engine, Owner, Tensor
from .methods import MethodSpec
from .params import ParamStore
from . import meft, peft

SKIPPED = "no gradient, skipped"
REL_FLOOR = 1e-3


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_err:.2e} (tol {self.tol:g}, {len(self.per_param)} params)"


def _loss_value(closure: Callable[[Engine], Tensor]) -> float:
    eng = Engine("f64")
    with eng.detached_scope():
        value = float(np.asarray(closure(eng).data))
    if not math.isfinite(value):
        raise GradCheckError(f"non-finite loss {value} during finite differences")
    return value


def finite_diff_check(closure: Callable[[Engine], Tensor], params: ParamStore, eps: float = 1e-6,
                      tol: float = 1e-5, name: str = "check") -> GradCheckReport:
    """Compare tape gradients of ``closure(engine)`` with central differences.

    Relative error per element is |tape - fd| / max(|tape|, |fd|, 1e-3); frozen
    entries are reported as skipped.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if params.dtype != np.float64:
        raise GradCheckError(f"finite differences need f64 parameters, got {params.dtype}")
    params.zero_grad()
    eng = Engine("f64")
    loss = closure(eng)
    value = float(np.asarray(loss.data))
    if not math.isfinite(value):
        eng.clear_tape()
        raise GradCheckError(f"non-finite loss {value}")
    if loss.node_id is not None:
        eng.backward(loss)
    tape = {n: params.entry(n).grad.copy() for n in params.trainable_names()}
    params.zero_grad()

    report = GradCheckReport(name, 0.0, tol)
    for pname, e in params.items():
        if e.frozen:
            report.skipped[pname] = SKIPPED
            continue
        data = e.value.data
        worst = 0.0
        for idx in np.ndindex(data.shape):
            orig = data[idx]
            data[idx] = orig + eps
            up = _loss_value(closure)
            data[idx] = orig - eps
            down = _loss_value(closure)
            data[idx] = orig
            fd = (up - down) / (2 * eps)
            g = tape[pname][idx]
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), REL_FLOOR))
        report.per_param[pname] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


# ---------------------------------------------------------------- suite


def _store(rng, **arrays) -> ParamStore:
    store = ParamStore(np.float64)
    for name, value in arrays.items():
        store.add(name, value, owner=Owner.SIDE, role="weight", group="method")
    return store


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _project(eng: Engine, out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar loss sum(out * w) for a fixed random w."""
    return eng.total(eng.mul(out, eng.const(w)))


def primitive_cases(rng) -> list[tuple[str, ParamStore, Callable[[Engine], Tensor]]]:
    """One closure per engine primitive on shapes up to 8x8."""
    cases = []

    def add(name, store, fn):
        cases.append((name, store, fn))

    def unary(name, op, shape=(5, 7), values=None):
        s = _store(rng, x=rng.normal(size=shape) if values is None else values)
        w = rng.normal(size=op(Engine("f64"), s["x"]).shape)
        add(name, s, lambda eng: _project(eng, op(eng, s["x"]), w))

    s = _store(rng, a=rng.normal(size=(4, 6)), b=rng.normal(size=(6, 5)))
    w = rng.normal(size=(4, 5))
    add("matmul", s, lambda eng: _project(eng, eng.matmul(s["a"], s["b"]), w))
    s2 = _store(rng, a=rng.normal(size=(2, 4, 6)), b=rng.normal(size=(5, 6)))
    w2 = rng.normal(size=(2, 4, 5))
    add("matmul trans_b", s2, lambda eng: _project(eng, eng.matmul(s2["a"], s2["b"], trans_b=True), w2))
    s3 = _store(rng, a=rng.normal(size=(3, 5, 4)), b=rng.normal(size=(5,)))
    w3 = rng.normal(size=(3, 5, 4))
    add("add broadcast", s3, lambda eng: _project(eng, eng.add(s3["a"], eng.reshape(s3["b"], (5, 1))), w3))
    s4 = _store(rng, a=rng.normal(size=(4, 6)), b=rng.normal(size=(6,)))
    w4 = rng.normal(size=(4, 6))
    add("mul broadcast", s4, lambda eng: _project(eng, eng.mul(s4["a"], s4["b"]), w4))
    unary("scale", lambda eng, x: eng.scale(x, -1.7))
    unary("transpose", lambda eng, x: eng.transpose(x, (1, 0)))
    unary("reshape", lambda eng, x: eng.reshape(x, (7, 5)))
    s5 = _store(rng, a=rng.normal(size=(3, 4)), b=rng.normal(size=(2, 4)))
    w5 = rng.normal(size=(5, 4))
    add("concat-rows", s5, lambda eng: _project(eng, eng.concat_rows([s5["a"], s5["b"]]), w5))
    unary("softmax-rows", lambda eng, x: eng.softmax_rows(x), (6, 8))
    s6 = _store(rng, x=rng.normal(size=(5, 8)), g=rng.normal(1.0, 0.3, size=(8,)), b=rng.normal(size=(8,)))
    w6 = rng.normal(size=(5, 8))
    add("layernorm", s6, lambda eng: _project(eng, eng.layernorm(s6["x"], s6["g"], s6["b"]), w6))
    unary("relu", lambda eng, x: eng.relu(x), values=_away_from_zero(rng, (6, 6)))
    unary("gelu", lambda eng, x: eng.gelu(x))
    unary("sigmoid", lambda eng, x: eng.sigmoid(x))
    unary("mean-over-axis", lambda eng, x: eng.mean(x, axis=-2), (3, 5, 4))
    s7 = _store(rng, x=rng.normal(size=(2, 5, 4)), t=rng.normal(size=(8, 4)))
    w7 = rng.normal(size=(2, 5, 4))
    add("embedding-add", s7, lambda eng: _project(eng, eng.embedding_add(s7["x"], s7["t"]), w7))
    s8 = _store(rng, z=rng.normal(size=(5, 6)))
    labels = rng.integers(0, 6, size=5)
    add("cross-entropy-with-logits", s8, lambda eng: eng.cross_entropy(s8["z"], labels))
    s9 = _store(rng, a=rng.normal(size=(4, 6)), b=rng.normal(size=(4, 6)))
    w9 = rng.normal(size=(4,))
    add("cosine-rows", s9, lambda eng: _project(eng, eng.cosine_rows(s9["a"], s9["b"]), w9))
    unary("l1-normalize-rows", lambda eng, x: eng.l1_normalize_rows(x), values=_away_from_zero(rng, (5, 6)))
    unary("frame-stack", lambda eng, x: eng.frame_stack(x, 3), (6, 4))
    return cases


def _toy_cfg() -> ModelConfig:
    return ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ff=32, seq_len=8, d_input=4, n_classes=3, proj_dim=8)


def _taps(cfg: ModelConfig, seed: int, upto: int | None = None):
    rng = np.random.default_rng(seed)
    backbone = init_backbone(cfg, seed)
    eng = Engine("f64")
    x = eng.const(rng.normal(size=(cfg.seq_len, cfg.d_input)))
    return backbone, encode(eng, backbone, cfg, x, retain=False, upto=upto)


def _randomize(store: ParamStore, rng, names) -> None:
    """Move zero-initialised entries off their identity point so every path carries gradient."""
    for n in names:
        store[n].data[...] = rng.normal(0.0, 0.5, size=store[n].shape)


def module_cases(rng, seed: int = 7) -> list[tuple[str, ParamStore, Callable[[Engine], Tensor]]]:
    cases = []
    d = 6

    s = ParamStore(np.float64)
    peft.add_adapter(s, rng, "ad", d, 3)
    _randomize(s, rng, ["ad.up.weight", "ad.up.bias", "ad.ln.bias", "ad.down.bias"])
    x = _away_from_zero(rng, (5, d))
    w = rng.normal(size=(5, d))
    cases.append(("adapter_forward", s, lambda eng, s=s: _project(eng, peft.adapter_forward(eng, s, "ad", eng.const(x)), w)))

    s = _store(rng, W=rng.normal(size=(5, d)), A=rng.normal(size=(2, d)), B=rng.normal(size=(5, 2)),
               b=rng.normal(size=(5,)))
    x2 = rng.normal(size=(4, d))
    w2 = rng.normal(size=(4, 5))
    cases.append(("lora_forward", s, lambda eng, s=s: _project(
        eng, peft.lora_forward(eng, s["W"], s["A"], s["B"], eng.const(x2), 2.0, bias=s["b"]), w2)))

    s = _store(rng, alpha=rng.normal(0, 0.1, size=(1,)), hf=rng.normal(size=(4, d)), hg=rng.normal(size=(4, d)))
    w3 = rng.normal(size=(4, d))
    cases.append(("gate_combine", s, lambda eng, s=s: _project(eng, meft.gate_combine(eng, s["alpha"], s["hf"], s["hg"]), w3)))

    s = _store(rng, Fi=rng.normal(size=(5, d)), FN=rng.normal(size=(5, d)))
    w4 = rng.normal(size=(5, d))
    cases.append(("unipt_interact", s, lambda eng, s=s: _project(eng, meft.unipt_interact(eng, s["Fi"], s["FN"]), w4)))

    cfg = _toy_cfg()
    _, taps = _taps(cfg, seed)
    s = ParamStore(np.float64)
    meft.add_unipt(s, cfg, MethodSpec("unipt", rf=4), np.random.default_rng(seed))
    w5 = rng.normal(size=(cfg.seq_len, cfg.d_model // 4))
    cases.append(("unipt_interact + aggregate", s,
                  lambda eng, s=s: _project(eng, meft.unipt_aggregate(eng, s, cfg, taps), w5)))

    s = ParamStore(np.float64)
    meft.add_lst(s, cfg, MethodSpec("lst", rf=4), np.random.default_rng(seed))
    _randomize(s, rng, [n for n in s if ".up." in n or n.startswith("lst.gate")])
    w6 = rng.normal(size=(cfg.seq_len, cfg.d_model // 4))
    cases.append(("lst side block rf=4", s, lambda eng, s=s: _project(eng, meft.lst_forward(eng, s, cfg, taps), w6)))

    backbone, taps_s = _taps(cfg, seed, upto=cfg.n_layers - 1)
    meft.add_sherl(backbone, cfg, MethodSpec("sherl", rf=4), np.random.default_rng(seed))
    backbone.freeze_all()
    for n in backbone.names(group="method"):
        backbone.set_frozen(n, False)
    backbone["sherl.gate"].data[...] = 0.05
    rho = meft.sherl_redundancy(Engine("f64"), taps_s, cfg.n_layers)
    w7 = rng.normal(size=(cfg.seq_len, cfg.d_model))
    cases.append(("sherl_forward (side params, gate)", backbone,
                  lambda eng: _project(eng, meft.sherl_forward(eng, backbone, cfg, taps_s, rho), w7)))
    return cases


def run_suite(tol: float = 1e-5, eps: float = 1e-6, seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for name, store, closure in primitive_cases(rng) + module_cases(rng):
        reports.append(finite_diff_check(closure, store, eps=eps, tol=tol, name=name))
    return reports
