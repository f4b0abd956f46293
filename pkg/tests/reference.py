"""Straight-line numpy re-implementations used as independent oracles."""

import math

import numpy as np


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1 + math.erf(v / math.sqrt(2))))(x)


def _stack3(x):
    p = np.vstack([np.zeros((1, x.shape[1])), x, np.zeros((1, x.shape[1]))])
    return np.hstack([p[:-2], p[1:-1], p[2:]])


def _lin(x, P, name):
    return x @ P[f"{name}.weight"].T + P[f"{name}.bias"]


def reference_layer(P, cfg, i, h):
    p = f"layers.{i}"
    dh = cfg.d_model // cfg.n_heads
    a = _ln(h, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"])
    q, k, v = (_lin(a, P, f"{p}.attn.{t}") for t in "qkv")
    heads = []
    for hd in range(cfg.n_heads):
        s = slice(hd * dh, (hd + 1) * dh)
        heads.append(_softmax(q[:, s] @ k[:, s].T / math.sqrt(dh)) @ v[:, s])
    h = h + _lin(np.hstack(heads), P, f"{p}.attn.o")
    f = _lin(_gelu(_lin(_ln(h, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"]), P, f"{p}.ffn.fc1")), P, f"{p}.ffn.fc2")
    return h + f


def reference_encode(P, cfg, x):
    h = _lin(_stack3(_lin(_stack3(x), P, "frontend.conv1")), P, "frontend.conv2") + P["pos.embedding"][: len(x)]
    taps = [h]
    for i in range(1, cfg.n_layers + 1):
        h = reference_layer(P, cfg, i, h)
        taps.append(h)
    return taps


def _softmax(z):
    w = np.exp(z - z.max(-1, keepdims=True))
    return w / w.sum(-1, keepdims=True)


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def _gate(alpha, hf, hg, T=0.1):
    mu = _sigmoid(float(alpha[0]) / T)
    return mu * hf + (1 - mu) * hg


def _adapter(P, prefix, x):
    h = _lin(_ln(x, P[f"{prefix}.ln.gain"], P[f"{prefix}.ln.bias"]), P, f"{prefix}.down")
    return x + _lin(np.maximum(h, 0), P, f"{prefix}.up")


def reference_lst(P, n_layers, taps):
    g = _lin(taps[0], P, "lst.down.0")
    for i in range(1, n_layers + 1):
        hf = _lin(taps[i], P, f"lst.down.{i}")
        g = _adapter(P, f"lst.block.{i}", _gate(P[f"lst.gate.{i}"], hf, g))
    return g


def reference_sherl(P, cfg, taps):
    N = cfg.n_layers
    m = N - 2
    pooled = [taps[i].mean(0) for i in range(1, m + 1)]

    def cos(a, b):
        return max(0.0, float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))

    rho = [np.mean([cos(pooled[i], pooled[j]) for j in range(m) if j != i]) if m > 1 else 0.0 for i in range(m)]
    kv = np.vstack([(1 - rho[i - 1]) * _lin(taps[i], P, f"sherl.proj.{i}") for i in range(1, m + 1)])
    guide = taps[N - 1]
    q = _lin(guide, P, "sherl.q")
    k = _lin(kv, P, "sherl.k")
    att = _softmax(q @ k.T / math.sqrt(kv.shape[1])) @ kv
    early = _lin(att, P, "sherl.o")
    return reference_layer(P, cfg, N, _gate(P["sherl.gate"], early, guide)), rho
