"""Run configuration: one flat JSON object, every key optional with a documented default."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .depth_model import BiasKind
from .errors import DepthCalError, FormatError
from .map_index import FilterConfig
from .optimizer import OptimizationConfig

_FILTER_KEYS = [f.name for f in dataclasses.fields(FilterConfig)]
_OPT_KEYS = [f.name for f in dataclasses.fields(OptimizationConfig)]
_RUN_KEYS = ["model_kind", "d_min"]


@dataclass(frozen=True)
class RunConfig:
    """Filter and optimization settings plus loader options.

    Keys of the file are the field names of :class:`FilterConfig` and
    :class:`OptimizationConfig` together with ``model_kind`` (bias model
    family) and ``d_min`` (minimum depth kept by the loader, meters).
    """

    filter: FilterConfig = field(default_factory=FilterConfig)
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)
    model_kind: BiasKind = BiasKind.SCALED_POLYNOMIAL
    d_min: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "model_kind", BiasKind(self.model_kind))
        if not self.d_min >= 0:
            raise FormatError("d_min must be non-negative")

    def to_dict(self) -> dict:
        out = {}
        for key in _FILTER_KEYS:
            out[key] = getattr(self.filter, key)
        for key in _OPT_KEYS:
            val = getattr(self.optimization, key)
            out[key] = list(val) if isinstance(val, tuple) else getattr(val, "value", val)
        out["model_kind"] = self.model_kind.value
        out["d_min"] = self.d_min
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise FormatError("configuration must be a JSON object")
        unknown = set(data) - set(_FILTER_KEYS) - set(_OPT_KEYS) - set(_RUN_KEYS)
        if unknown:
            raise FormatError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        try:
            fcfg = FilterConfig(**{k: data[k] for k in _FILTER_KEYS if k in data})
            ocfg = OptimizationConfig(**{k: data[k] for k in _OPT_KEYS if k in data})
            return cls(fcfg, ocfg, **{k: data[k] for k in _RUN_KEYS if k in data})
        except (TypeError, ValueError, DepthCalError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"invalid configuration: {exc}") from exc

    def with_overrides(self, **kwargs) -> "RunConfig":
        data = self.to_dict()
        data.update({k: v for k, v in kwargs.items() if v is not None})
        return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from exc
    return RunConfig.from_dict(data)
