"""Fine-tuning strategy descriptors."""

from __future__ import annotations

from dataclasses import dataclass

PEFT_KINDS = ("adapter", "lora", "adalora", "bitfit")
MEFT_KINDS = ("lst", "unipt", "sherl")
KINDS = ("vanilla", "head") + PEFT_KINDS + MEFT_KINDS

# which hyperparameter each kind takes
_HYPER = {"adapter": "dim", "lora": "r", "adalora": "init_r", "lst": "rf", "unipt": "rf", "sherl": "rf"}
_DEFAULTS = {"dim": 64, "r": 64, "init_r": 64, "rf": 8}


class MethodError(ValueError):
    pass


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    dim: int | None = None
    r: int | None = None
    init_r: int | None = None
    rf: int | None = None
    side_hidden: int | None = None  # LST adapter width; None -> 256 at d_model=768, else d_side // 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MethodError(f"unknown method {self.kind!r}; expected one of {', '.join(KINDS)}")
        key = _HYPER.get(self.kind)
        if key is not None and getattr(self, key) is None:
            object.__setattr__(self, key, _DEFAULTS[key])
        for k in ("dim", "r", "init_r", "rf", "side_hidden"):
            v = getattr(self, k)
            if v is not None and (not isinstance(v, int) or v <= 0):
                raise MethodError(f"{self.kind}: {k} must be a positive integer, got {v!r}")

    @property
    def family(self) -> str:
        if self.kind in PEFT_KINDS:
            return "peft"
        if self.kind in MEFT_KINDS:
            return "meft"
        return self.kind

    @property
    def hyper(self) -> int | None:
        key = _HYPER.get(self.kind)
        return getattr(self, key) if key else None

    @property
    def label(self) -> str:
        key = _HYPER.get(self.kind)
        if key is None:
            return self.kind
        return f"{self.kind}_{key}={getattr(self, key)}"

    @classmethod
    def parse(cls, value) -> "MethodSpec":
        """Accept a MethodSpec, a mapping, or a string like ``lst``, ``lst:8``, ``lora_r=64``."""
        if isinstance(value, MethodSpec):
            return value
        if isinstance(value, dict):
            data = dict(value)
            kind = data.pop("kind", data.pop("name", None))
            if kind is None:
                raise MethodError("method entry needs a 'kind'")
            key = _HYPER.get(kind)
            if "value" in data and key:
                data[key] = data.pop("value")
            unknown = set(data) - {"dim", "r", "init_r", "rf", "side_hidden"}
            if unknown:
                raise MethodError(f"{kind}: unknown method field(s) {sorted(unknown)}")
            return cls(kind, **data)
        if isinstance(value, str):
            text = value.strip()
            for sep in (":", "_"):
                if sep in text:
                    kind, _, rest = text.partition(sep)
                    rest = rest.split("=")[-1]
                    if kind in _HYPER:
                        try:
                            num = int(rest)
                        except ValueError:
                            raise MethodError(f"bad hyperparameter in {value!r}") from None
                        return cls(kind, **{_HYPER[kind]: num})
            return cls(text)
        raise MethodError(f"cannot interpret method {value!r}")
