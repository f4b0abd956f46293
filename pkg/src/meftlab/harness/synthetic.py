"""Synthetic sequence-classification task standing in for dialect ID.

Each class owns a pair of input channels and a pair of sinusoid frequencies.
In linear mode only the labelled pair carries its waveform, at a fixed phase,
so class means differ and a linear classifier suffices. In nonlinear mode
every pair carries its waveform at a random phase; the labelled pair is
in phase (channel product positive) and all other pairs are in antiphase
(product negative). Class-conditional means are then zero, and the label
lives only in the per-step product of two channels.

A small constant ``offset`` is added to every channel, like the floor of a
non-negative spectrogram. It carries no label information, but it gives the
frozen encoder a constant direction that attention-only adaptations (LoRA on
q and v) need in order to form second-order statistics: with a perfectly
sign-symmetric input, a near-linear frozen encoder plus attention is an odd
function of the input and its time-average cannot see the label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_classes: int = 6
    seq_len: int = 64
    d_input: int = 12
    noise_std: float = 0.5
    nonlinear: bool = True
    offset: float = 0.1
    signatures: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.d_input < 2 * self.n_classes:
            raise ValueError(f"d_input={self.d_input} too small for {self.n_classes} channel pairs")
        sigs = self.frequency_signatures()
        if len(set(sigs)) != len(sigs):
            raise ValueError("class frequency signatures must be distinct")
        for f1, f2 in sigs:
            if not (0 < f1 < self.seq_len / 2 and 0 < f2 < self.seq_len / 2):
                raise ValueError(f"frequency indices {f1, f2} out of range for seq_len={self.seq_len}")

    def frequency_signatures(self) -> tuple[tuple[int, int], ...]:
        if self.signatures is not None:
            return tuple(tuple(s) for s in self.signatures)
        K = self.n_classes
        return tuple((1 + k, 2 * K + 1 - k) for k in range(K))


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    n_classes: int = field(default=0)

    def __post_init__(self):
        if not self.n_classes:
            self.n_classes = int(max(self.y_train.max(), self.y_eval.max())) + 1


def _waveform(t, n, freqs, phases):
    return sum(np.sin(2 * np.pi * f * t / n + p) for f, p in zip(freqs, phases))


def gen_samples(spec: SyntheticTaskSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, K = spec.seq_len, spec.n_classes
    t = np.arange(n)
    sigs = spec.frequency_signatures()
    x = np.zeros((len(labels), n, spec.d_input))
    for s, y in enumerate(labels):
        for j in range(K):
            if spec.nonlinear:
                w = _waveform(t, n, sigs[j], rng.uniform(0, 2 * np.pi, size=2))
                x[s, :, 2 * j] = w
                x[s, :, 2 * j + 1] = w if j == y else -w
            elif j == y:
                w = _waveform(t, n, sigs[j], (0.0, 0.0))
                x[s, :, 2 * j] = w
                x[s, :, 2 * j + 1] = w
    if spec.noise_std > 0:
        x += rng.normal(0.0, spec.noise_std, size=x.shape)
    return x + spec.offset


def gen_synthetic(spec: SyntheticTaskSpec, count: int, seed: int, eval_frac: float = 0.2) -> Dataset:
    """Balanced dataset with a stratified train/eval split; deterministic per seed."""
    K = spec.n_classes
    if count < K:
        raise ValueError(f"count={count} smaller than n_classes={K}")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % K
    x = gen_samples(spec, labels, rng)
    train_idx, eval_idx = [], []
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        n_eval = int(round(len(idx) * eval_frac))
        eval_idx.extend(idx[:n_eval])
        train_idx.extend(idx[n_eval:])
    tr = rng.permutation(np.array(train_idx, dtype=np.int64))
    ev = np.array(sorted(eval_idx), dtype=np.int64)
    return Dataset(x[tr], labels[tr], x[ev], labels[ev], K)


# ---------------------------------------------------------------- oracles


def linear_oracle(data: Dataset, ridge: float = 1e-3) -> float:
    """Eval accuracy (%) of a closed-form least-squares classifier on flattened inputs."""
    Xtr = data.x_train.reshape(len(data.x_train), -1)
    Xev = data.x_eval.reshape(len(data.x_eval), -1)
    Xtr = np.hstack([Xtr, np.ones((len(Xtr), 1))])
    Xev = np.hstack([Xev, np.ones((len(Xev), 1))])
    Y = np.eye(data.n_classes)[data.y_train]
    W = np.linalg.solve(Xtr.T @ Xtr + ridge * np.eye(Xtr.shape[1]), Xtr.T @ Y)
    return 100.0 * float(np.mean((Xev @ W).argmax(1) == data.y_eval))


def mlp_oracle(data: Dataset, hidden: int = 32, epochs: int = 60, lr: float = 1e-2, batch: int = 32,
               seed: int = 0) -> float:
    """Eval accuracy (%) of a per-step 2-layer ReLU MLP with mean pooling over time.

    Plain numpy with hand-written gradients, independent of the tape engine.
    """
    rng = np.random.default_rng(seed)
    d, K = data.x_train.shape[-1], data.n_classes
    params = {
        "W1": rng.normal(0, 1 / np.sqrt(d), (d, hidden)), "b1": np.zeros(hidden),
        "W2": rng.normal(0, 1 / np.sqrt(hidden), (hidden, K)), "b2": np.zeros(K),
    }
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0

    def forward(x):
        pre = x @ params["W1"] + params["b1"]
        act = np.maximum(pre, 0)
        pooled = act.mean(axis=1)
        return pre, act, pooled, pooled @ params["W2"] + params["b2"]

    n_tr = len(data.x_train)
    for _ in range(epochs):
        order = rng.permutation(n_tr)
        for s in range(0, n_tr, batch):
            idx = order[s:s + batch]
            x, y = data.x_train[idx], data.y_train[idx]
            pre, act, pooled, logits = forward(x)
            p = np.exp(logits - logits.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            p[np.arange(len(y)), y] -= 1
            g_logits = p / len(y)
            grads = {"W2": pooled.T @ g_logits, "b2": g_logits.sum(0)}
            g_pooled = g_logits @ params["W2"].T
            g_act = np.repeat(g_pooled[:, None, :], x.shape[1], axis=1) / x.shape[1]
            g_pre = g_act * (pre > 0)
            grads["W1"] = np.einsum("btd,bth->dh", x, g_pre)
            grads["b1"] = g_pre.sum((0, 1))
            step += 1
            for k in params:
                m[k] = 0.9 * m[k] + 0.1 * grads[k]
                v[k] = 0.999 * v[k] + 0.001 * grads[k] ** 2
                mh = m[k] / (1 - 0.9 ** step)
                vh = v[k] / (1 - 0.999 ** step)
                params[k] -= lr * mh / (np.sqrt(vh) + 1e-8)
    logits = forward(data.x_eval)[3]
    return 100.0 * float(np.mean(logits.argmax(1) == data.y_eval))
