"""Backbone + method + head assembled into one trainable classifier."""

from __future__ import annotations

import numpy as np

from . import meft
from .backbone import (
    NO_HOOKS,
    ModelConfig,
    classify_head,
    encode,
    final_norm,
    freeze_policy,
    init_backbone,
    init_head,
    linear,
)
from .engine import Engine, Owner, Tensor
from .methods import MethodSpec
from .params import ParamStore
from .peft import AdaLoraController, add_peft_params


class FineTuneModel:
    def __init__(self, cfg: ModelConfig, method, seed: int = 0, *, dtype=np.float64, materialize: bool = True):
        self.cfg = cfg
        self.method = MethodSpec.parse(method)
        self.seed = seed
        self.store: ParamStore = init_backbone(cfg, seed, dtype=dtype, materialize=materialize)
        self.hooks = NO_HOOKS
        fam = self.method.family
        if fam == "peft":
            self.hooks = add_peft_params(self.store, cfg, self.method, seed)
        elif fam == "meft":
            meft.add_meft_params(self.store, cfg, self.method, seed)
        init_head(self.store, cfg, seed)
        freeze_policy(self.store, self.method)
        self.adalora: AdaLoraController | None = None

    def attach_adalora(self, total_steps: int, **kw) -> AdaLoraController:
        self.adalora = AdaLoraController(self.store, self.method.init_r, total_steps, **kw)
        return self.adalora

    def features(self, eng: Engine, x: Tensor) -> Tensor:
        """Head input (n x d_model) for the configured method."""
        cfg, store, kind = self.cfg, self.store, self.method.kind
        if kind == "lst":
            taps = encode(eng, store, cfg, x, retain=False)
            g = meft.lst_forward(eng, store, cfg, taps)
            with eng.owner(Owner.SIDE, "lst"):
                return linear(eng, g, store, "lst.up")
        if kind == "unipt":
            taps = encode(eng, store, cfg, x, retain=False)
            agg = meft.unipt_aggregate(eng, store, cfg, taps)
            with eng.owner(Owner.SIDE, "unipt"):
                return linear(eng, agg, store, "unipt.up")
        if kind == "sherl":
            taps = encode(eng, store, cfg, x, retain=False, upto=cfg.n_layers - 1)
            return meft.sherl_forward(eng, store, cfg, taps)
        taps = encode(eng, store, cfg, x, retain=kind != "head", hooks=self.hooks)
        if kind == "head":
            with eng.detached_scope():
                return final_norm(eng, store, cfg, taps.final)
        return final_norm(eng, store, cfg, taps.final)

    def forward(self, eng: Engine, x: Tensor) -> Tensor:
        return classify_head(eng, self.store, self.features(eng, x))

    def loss(self, eng: Engine, x: Tensor, labels) -> Tensor:
        with eng.owner(Owner.HEAD, "loss"):
            loss = eng.cross_entropy(self.forward(eng, x), labels)
        if self.adalora is not None:
            pen = self.adalora.penalty(eng)
            if pen is not None:
                loss = eng.add(loss, pen)
        return loss

    def predict(self, eng: Engine, x: Tensor) -> np.ndarray:
        with eng.detached_scope():
            return self.forward(eng, x).data.argmax(axis=-1)

    def trainable_ratio(self) -> float:
        return self.store.trainable_ratio()
