import math

import numpy as np
import pytest

from meftlab.backbone import ModelConfig
from meftlab.engine import Engine, Owner, ShapeError
from meftlab.harness.optim import Adam
from meftlab.model import FineTuneModel
from meftlab.params import ParamStore
from meftlab.peft import (
    AdaLoraController,
    adapter_forward,
    add_adalora,
    add_adapter,
    add_lora,
    budget_schedule,
    lora_forward,
)

CFG = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, seq_len=6, d_input=4, n_classes=3, proj_dim=5)


def _adapter(d=2, dim=1, seed=0):
    store = ParamStore()
    add_adapter(store, np.random.default_rng(seed), "ad", d, dim)
    return store


def test_adapter_up_zero_is_identity():
    store = _adapter(6, 3)
    x = np.random.default_rng(1).normal(size=(4, 6))
    out = adapter_forward(Engine(), store, "ad", Engine().const(x)).data
    assert np.array_equal(out, x)


def test_adapter_zero_input():
    store = _adapter(4, 2)
    store["ad.up.weight"].data[...] = 1.0
    out = adapter_forward(Engine(), store, "ad", Engine().const(np.zeros((3, 4)))).data
    assert np.all(out == 0)


def test_adapter_hand_arithmetic():
    store = _adapter(2, 1)
    store["ad.down.weight"].data[...] = [[-1.0, 1.0]]
    store["ad.up.weight"].data[...] = [[1.0], [2.0]]
    store["ad.up.bias"].data[...] = [0.5, 0.0]
    x = np.array([[1.0, 3.0]])
    # LN: mean 2, var 1 -> xhat = [-1, 1]/sqrt(1+eps); down -> 2/s; relu keeps it
    s = math.sqrt(1 + 1e-5)
    want = x + np.array([[2 / s + 0.5, 4 / s]])
    np.testing.assert_allclose(adapter_forward(Engine(), store, "ad", Engine().const(x)).data, want, rtol=1e-12)


def test_adapter_shape_mismatch():
    with pytest.raises(ShapeError):
        adapter_forward(Engine(), _adapter(4, 2), "ad", Engine().const(np.ones((2, 3))))


def test_lora_hand_example():
    eng = Engine()
    y = lora_forward(eng, eng.const(np.eye(2)), eng.const([[1.0, 0.0]]), eng.const([[0.0], [1.0]]),
                     eng.const([[1.0, 0.0]]))
    np.testing.assert_array_equal(y.data, [[1.0, 1.0]])


def test_lora_b_zero_matches_frozen_bitwise():
    rng = np.random.default_rng(2)
    store = ParamStore()
    add_lora(store, rng, "l", 5, 4, 2)
    W, x = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    eng = Engine()
    y = lora_forward(eng, eng.const(W), store["l.A"], store["l.B"], eng.const(x))
    assert np.array_equal(y.data, x @ W.T)


def test_lora_rank_must_be_positive():
    with pytest.raises(ValueError):
        add_lora(ParamStore(), np.random.default_rng(0), "l", 4, 4, 0)


def test_lora_gradient_reaches_a_and_b_not_w():
    rng = np.random.default_rng(3)
    store = ParamStore()
    add_lora(store, rng, "l", 4, 4, 2)
    store["l.B"].data[...] = rng.normal(size=(4, 2))
    store.add("W", rng.normal(size=(4, 4)), owner=Owner.BACKBONE, role="weight", group="layer1", frozen=True)
    eng = Engine()
    y = lora_forward(eng, store["W"], store["l.A"], store["l.B"], eng.const(rng.normal(size=(3, 4))))
    eng.backward(eng.total(eng.mul(y, y)))
    assert np.any(store["l.A"].grad != 0) and np.any(store["l.B"].grad != 0)
    assert np.all(store["W"].grad == 0)


# ---------------------------------------------------------------- AdaLoRA


def _schedule_oracle(t, init_r, total):
    target = init_r // 2
    end = 0.6 * total
    if t <= 0:
        return init_r
    if t >= end:
        return target
    return math.ceil(target + (init_r - target) * (1 - t / end) ** 3 - 1e-12)


def test_schedule_starts_at_init_r():
    assert budget_schedule(0, 8, 100) == 8


def test_schedule_matches_formula():
    assert [budget_schedule(t, 4, 100) for t in range(101)] == [_schedule_oracle(t, 4, 100) for t in range(101)]


def _ada_controller(r=4, t_mask=1, n=1):
    store = ParamStore()
    rng = np.random.default_rng(0)
    for i in range(1, n + 1):
        add_adalora(store, rng, f"adalora.{i}.q", 4, r)
    return store, AdaLoraController(store, r, 100, t_mask=t_mask)


def test_top_k_masks_less_important():
    store, ctl = _ada_controller(r=2)
    store["adalora.1.q.lam"].data[...] = [1.0, 1.0]
    ctl.states[0].importance[...] = [5.0, 0.1]
    ctl.init_r = 2
    ctl.schedule = lambda step: 1
    ctl.reallocate(1)
    assert list(ctl.states[0].mask) == [True, False]
    assert store["adalora.1.q.lam"].data[1] == 0.0


def test_active_rank_follows_schedule_and_never_grows():
    store, ctl = _ada_controller(r=4)
    rng = np.random.default_rng(1)
    lam = store["adalora.1.q.lam"]
    ranks = []
    for t in range(1, 101):
        lam.data[...] = np.where(ctl.states[0].mask, rng.normal(size=4), 0)
        lam.grad[...] = rng.normal(size=4)
        ctl.step(t)
        ranks.append(ctl.active_ranks()[0])
        assert ranks[-1] == _schedule_oracle(t, 4, 100)
        assert np.all(lam.data[~ctl.states[0].mask] == 0)
    assert all(a >= b for a, b in zip(ranks, ranks[1:]))


def test_budget_is_pooled_across_matrices():
    store, ctl = _ada_controller(r=4, n=2)
    ctl.states[0].importance[...] = [9, 8, 7, 6]
    ctl.states[1].importance[...] = [1, 1, 1, 1]
    ctl.reallocate(100)  # schedule 2 per matrix, 4 in total
    assert ctl.active_ranks() == [4, 0]


def test_orthogonality_penalty_value():
    store, ctl = _ada_controller(r=2)
    P = store["adalora.1.q.P"].data
    Q = store["adalora.1.q.Q"].data
    want = 0.1 * (np.sum((P.T @ P - np.eye(2)) ** 2) + np.sum((Q @ Q.T - np.eye(2)) ** 2))
    assert float(ctl.penalty(Engine()).data) == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------- wired into the model


def _logits(method, x):
    model = FineTuneModel(CFG, method, seed=5)
    return model.forward(Engine(), Engine().const(x)).data


@pytest.mark.parametrize("method", ["lora:4", "adapter:4", "adalora:4"])
def test_init_identity(method):
    x = np.random.default_rng(0).normal(size=(2, CFG.seq_len, CFG.d_input))
    assert np.array_equal(_logits(method, x), _logits("head", x))


@pytest.mark.parametrize("method", ["lora:4", "adapter:4", "adalora:4", "bitfit"])
def test_backbone_unchanged_after_step(method):
    model = FineTuneModel(CFG, method, seed=1)
    if model.method.kind == "adalora":
        model.attach_adalora(total_steps=10)
    before = model.store.snapshot()
    eng = Engine()
    rng = np.random.default_rng(0)
    loss = model.loss(eng, eng.const(rng.normal(size=(3, CFG.seq_len, CFG.d_input))), [0, 1, 2])
    eng.backward(loss)
    Adam(model.store, lr=1e-2).step(1)
    after = model.store.snapshot()
    for name, e in model.store.items():
        if e.frozen:
            assert np.array_equal(before[name], after[name]), name
    assert any(not np.array_equal(before[n], after[n]) for n in model.store.trainable_names())


def _peak(method, batch=2):
    from meftlab.cli import measure_retained
    return measure_retained(ModelConfig(), method, batch)


def test_peft_still_retains_backbone_activations():
    assert _peak("lora:8") >= 0.5 * _peak("vanilla")
