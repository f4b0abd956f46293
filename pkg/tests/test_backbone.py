import numpy as np
import pytest

from meftlab.backbone import ModelConfig, classify_head, encode, freeze_policy, init_backbone, init_head
from meftlab.engine import Engine, Owner, ShapeError
from meftlab.harness.cost import backbone_param_counts
from meftlab.methods import MethodSpec
from meftlab.model import FineTuneModel
from meftlab.params import ParamStore
from reference import reference_encode

TINY = ModelConfig(n_layers=2, d_model=4, n_heads=2, d_ff=8, seq_len=5, d_input=3, n_classes=2, proj_dim=3)


# ---------------------------------------------------------------- tests


def test_encode_matches_reference():
    cfg = ModelConfig(n_layers=2, d_model=4, n_heads=2, d_ff=8, seq_len=6, d_input=3)
    store = init_backbone(cfg, seed=3)
    P = {n: e.value.data for n, e in store.items()}
    x = np.random.default_rng(3).normal(size=(6, 3))
    taps = encode(Engine(), store, cfg, Engine().const(x), retain=False)
    ref = reference_encode(P, cfg, x)
    np.testing.assert_allclose(taps.embeddings.data, ref[0], rtol=1e-12, atol=1e-14)
    for got, want in zip(taps.per_layer, ref[1:]):
        np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-13)


def test_init_is_seeded():
    a, b, c = init_backbone(TINY, 1), init_backbone(TINY, 1), init_backbone(TINY, 2)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)


def test_init_statistics():
    store = init_backbone(ModelConfig(d_model=64, d_ff=256), 0)
    w = store["layers.1.ffn.fc1.weight"].data
    assert abs(w.std() - 0.02) < 0.002
    assert np.all(store["layers.1.attn.q.bias"].data == 0)
    assert np.all(store["layers.1.ln1.gain"].data == 1)
    assert store.entry("frontend.conv1.weight").group == "frontend"
    assert store.entry("pos.embedding").group == "pos"


def test_88m_param_count():
    cfg = ModelConfig.whisper_small()
    total = sum(backbone_param_counts(cfg).values())
    assert abs(total - 88e6) / 88e6 < 0.05
    # closed form cross-check of one encoder layer
    d, f = 768, 3072
    layer = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
    stem = (3 * 80 * d + d) + (3 * d * d + d) + 1500 * d
    head = (d * 256 + 256) + (256 * 6 + 6)
    assert total == stem + 12 * layer + 2 * d + head
    assert FineTuneModel(cfg, "vanilla", materialize=False).store.count() == total


def test_zero_input_gives_zero_taps():
    store = init_backbone(TINY, 0)
    store["pos.embedding"].data[...] = 0
    taps = encode(Engine(), store, TINY, Engine().const(np.zeros((5, 3))))
    assert all(np.all(t.data == 0) for t in [taps.embeddings] + taps.per_layer)


def test_retain_false_keeps_tape_empty():
    store = init_backbone(TINY, 0)
    eng = Engine()
    encode(eng, store, TINY, eng.const(np.ones((5, 3))), retain=False)
    assert eng.peak_retained_bytes() == 0 and not eng.tape


def test_taps_shape_and_batch():
    store = init_backbone(TINY, 0)
    taps = encode(Engine(), store, TINY, Engine().const(np.ones((2, 5, 3))), retain=False)
    assert all(t.shape == (2, 5, 4) for t in taps.per_layer)
    assert taps.final is taps.per_layer[-1] and taps.layer(0) is taps.embeddings


def test_encode_rejects_bad_input():
    store = init_backbone(TINY, 0)
    with pytest.raises(ShapeError):
        encode(Engine(), store, TINY, Engine().const(np.ones((5, 4))))
    with pytest.raises(ShapeError):
        encode(Engine(), store, TINY, Engine().const(np.ones((9, 3))))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


def _head_store(d_feat=4, proj=3, K=2):
    cfg = ModelConfig(n_layers=1, d_model=d_feat, n_heads=1, d_ff=4, seq_len=4, d_input=2, n_classes=K, proj_dim=proj)
    store = ParamStore()
    init_head(store, cfg, 0)
    return store


def test_head_hand_arithmetic():
    store = _head_store()
    store["head.proj.weight"].data[...] = [[1, 0, 0, 0], [0, 1, 0, 0], [1, 1, 1, 1]]
    store["head.proj.bias"].data[...] = [0, 0, 1]
    store["head.fc.weight"].data[...] = [[1, 0, 0], [0, 0, 1]]
    store["head.fc.bias"].data[...] = [0.5, 0]
    feats = np.array([[1.0, 2, 3, 4], [3, 0, 1, 0]])
    # proj rows: [1, 2, 11] and [3, 0, 5]; mean [2, 1, 8]; fc -> [2.5, 8]
    logits = classify_head(Engine(), store, Engine().const(feats)).data
    np.testing.assert_allclose(logits, [2.5, 8.0])


def test_head_zero_init_gives_zero_logits():
    cfg = TINY
    store = ParamStore()
    init_head(store, cfg, 0, zero=True)
    logits = classify_head(Engine(), store, Engine().const(np.ones((5, 4)))).data
    assert np.all(logits == 0)


def test_head_constant_rows_match_single_row():
    store = _head_store()
    row = np.random.default_rng(0).normal(size=(1, 4))
    a = classify_head(Engine(), store, Engine().const(np.repeat(row, 3, axis=0))).data
    b = classify_head(Engine(), store, Engine().const(row)).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_head_pooling_permutation_invariance():
    store = _head_store()
    feats = np.random.default_rng(1).normal(size=(4, 4))
    a = classify_head(Engine(), store, Engine().const(feats)).data
    b = classify_head(Engine(), store, Engine().const(feats[::-1].copy())).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_head_width_mismatch():
    store = _head_store()
    with pytest.raises(ShapeError):
        classify_head(Engine(), store, Engine().const(np.ones((2, 5))))


def test_head_params_owned_by_head():
    store = _head_store()
    assert {store.entry(n).owner for n in store} == {Owner.HEAD}


def _trainable(method):
    return set(FineTuneModel(TINY, method).store.trainable_names())


def test_freeze_head_tuning_is_head_only():
    assert _trainable("head") == {n for n in FineTuneModel(TINY, "head").store if n.startswith("head.")}


def test_freeze_vanilla_keeps_frontend_frozen():
    names = _trainable("vanilla")
    assert not any(n.startswith(("frontend.", "pos.")) for n in names)
    assert "layers.1.attn.q.weight" in names and "final_ln.gain" in names


def test_freeze_bitfit():
    store = FineTuneModel(TINY, "bitfit").store
    names = set(store.trainable_names())
    assert "layers.1.ln1.bias" in names and "layers.1.ln1.gain" not in names
    assert not any(store.entry(n).role == "weight" and not n.startswith("head.") for n in names)
    expected = {n for n, e in store.items()
                if n.startswith("head.") or (e.role == "bias" and e.group not in ("frontend", "pos"))}
    assert names == expected


@pytest.mark.parametrize("method", ["vanilla", "head", "bitfit", "lora:2", "adalora:2", "adapter:2", "lst:2",
                                    "unipt:2", "sherl:2"])
def test_head_always_trainable(method):
    cfg = ModelConfig(n_layers=3, d_model=4, n_heads=2, d_ff=8, seq_len=5, d_input=3, n_classes=2, proj_dim=3)
    store = FineTuneModel(cfg, method).store
    assert all(not store.entry(n).frozen for n in store.names(group="head"))


def test_vanilla_ratio_88m():
    model = FineTuneModel(ModelConfig.whisper_small(), "vanilla", materialize=False)
    assert model.trainable_ratio() == pytest.approx(96.48, abs=1.0)


def test_freeze_policy_unknown_method():
    with pytest.raises(ValueError):
        freeze_policy(init_backbone(TINY, 0), MethodSpec.parse("prefix"))


def test_encoder_determinism():
    store = init_backbone(TINY, 4)
    x = np.random.default_rng(0).normal(size=(5, 3))
    a = encode(Engine(), store, TINY, Engine().const(x)).final.data
    b = encode(Engine(), store, TINY, Engine().const(x)).final.data
    assert np.array_equal(a, b)
