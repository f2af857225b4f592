"""Run configuration: plain ``key = value`` files plus command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from .detector.model import ModelConfig
from .tamper_synth.ops import TECHNIQUES
from .tensor_core import SgdConfig

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"backbone"}
_BACKBONE_KEYS = {"channels", "input_size"}
_SGD_KEYS = {f.name for f in fields(SgdConfig)}


@dataclass(frozen=True)
class RunConfig:
    """Every tunable constant of a run.

    Model and optimiser constants live in :class:`ModelConfig` and
    :class:`SgdConfig`; both are addressed by their flat field names in
    config files (``lam = 10``, ``learning_rate = 0.001``, ``channels = 16,32,64,64``).
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(decay_step=800))
    steps: int = 2000
    images_per_step: int = 1
    augment: Tuple[str, ...] = ("flip",)
    seed: int = 0
    jobs: int = 1
    test_frac: float = 0.1
    techniques: Tuple[str, ...] = TECHNIQUES
    min_fraction: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.images_per_step < 1:
            raise ValueError("images_per_step must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        for t in self.techniques:
            if t not in TECHNIQUES:
                raise ValueError(f"unknown technique {t!r}")

    # -- flat view ---------------------------------------------------------
    def items(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for f in fields(self):
            if f.name not in ("model", "sgd"):
                out[f.name] = getattr(self, f.name)
        for f in fields(SgdConfig):
            out[f.name] = getattr(self.sgd, f.name)
        for f in fields(ModelConfig):
            if f.name != "backbone":
                out[f.name] = getattr(self.model, f.name)
        out["channels"] = self.model.backbone.channels
        out["input_size"] = self.model.backbone.input_size
        return dict(sorted(out.items()))

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items().items())

    def with_overrides(self, pairs: Dict[str, str]) -> "RunConfig":
        """Apply string-valued ``key -> value`` overrides (unknown keys are errors)."""
        if not pairs:
            return self
        current = self.items()
        top, sgd, model, backbone = {}, {}, {}, {}
        for key, raw in pairs.items():
            if key not in current:
                raise ValueError(f"unknown config key {key!r}")
            value = _parse(raw, current[key])
            if key in _BACKBONE_KEYS:
                backbone[key] = value
            elif key in _SGD_KEYS:
                sgd[key] = value
            elif key in _MODEL_KEYS:
                model[key] = value
            else:
                top[key] = value
        bb = replace(self.model.backbone, **backbone) if backbone else self.model.backbone
        return replace(self, model=replace(self.model, backbone=bb, **model), sgd=replace(self.sgd, **sgd), **top)


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, like: Any) -> Any:
    """Convert ``raw`` to the type of the current value ``like``."""
    text = raw.strip()
    if text.lower() == "none":
        return None
    if isinstance(like, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return text.lower() == "true"
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        kind = type(like[0]) if like else str
        return tuple(_parse(p, kind()) if kind is not str else p for p in parts)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float) or like is None:
        try:
            return float(text)
        except ValueError:
            return text
    return text


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{origin}:{lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_run_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                    base: RunConfig = RunConfig()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``KEY=VALUE`` overrides (later wins)."""
    cfg = base
    if path is not None:
        cfg = cfg.with_overrides(parse_config_text(Path(path).read_text(), str(path)))
    extra = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        extra[k.strip()] = v
    return cfg.with_overrides(extra)
