"""JSON run configuration.

Example::

    {
      "dataset": {"path": "data/dev.jsonl", "format": "canonical", "filter_nonempty": false},
      "backends": {
        "interp":   {"kind": "http_chat", "endpoint": "http://localhost:8000", "model": "llama-3.1-8b-instruct"},
        "infill":   {"kind": "http_chat", "endpoint": "http://localhost:8001", "model": "infill-lora"},
        "text2sql": {"kind": "http_chat", "endpoint": "http://localhost:8002", "model": "qwen2.5-coder-32b"}
      },
      "generation": {"temperature": 0.0, "max_tokens": 1024},
      "sandbox": {"timeout_ms": 5000, "max_rows": 10000},
      "comparison": "multiset",
      "concurrency": 1,
      "cache_path": "cache/responses.jsonl",
      "output_dir": "runs/latest",
      "seed": 0,
      "max_interpretations": 10
    }

Relative paths are resolved against the directory holding the config file.
Stages without an entry fall back to ``default`` or to a related stage.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .llm.gateway import BackendConfig, BackendConfigError, Gateway, open_cache
from .pipeline import DEFAULT_MAX_INTERPRETATIONS, PipelineConfig
from .sandbox import COMPARISON_MODES, DEFAULT_MAX_ROWS, DEFAULT_TIMEOUT_MS, ExecutionLimits, Sandbox

STAGES = ("interp", "infill", "text2sql", "self_correct", "end_to_end", "rewrite", "validator")
PIPELINE_STAGES = ("interp", "infill", "text2sql", "self_correct", "end_to_end")
STAGE_FALLBACKS = {
    "self_correct": "interp",
    "end_to_end": "text2sql",
    "rewrite": "interp",
    "validator": "text2sql",
}


class ConfigError(ValueError):
    pass


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    path = Path(os.path.expanduser(value))
    return str(path if path.is_absolute() else base / path)


@dataclass
class RunConfig:
    dataset_path: str | None = None
    dataset_format: str = "canonical"
    filter_nonempty: bool = False
    backends: dict[str, BackendConfig] = field(default_factory=dict)
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    max_rows: int = DEFAULT_MAX_ROWS
    comparison: str = "multiset"
    concurrency: int = 1
    cache_path: str | None = None
    output_dir: str = "out"
    seed: int = 0
    max_interpretations: int = DEFAULT_MAX_INTERPRETATIONS
    _gateways: dict[str, Gateway] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.comparison not in COMPARISON_MODES:
            raise ConfigError(f"comparison must be one of {COMPARISON_MODES}, got {self.comparison!r}")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | os.PathLike = ".") -> "RunConfig":
        base = Path(base_dir)
        dataset = data.get("dataset", {})
        generation = data.get("generation", {})
        sandbox = data.get("sandbox", {})
        cache_path = _resolve(base, data.get("cache_path"))
        backends = {}
        for name, raw in data.get("backends", {}).items():
            if name not in STAGES and name != "default":
                raise ConfigError(f"unknown stage {name!r} in backends; expected one of {STAGES + ('default',)}")
            merged = {**generation, **raw}
            merged.setdefault("cache_path", cache_path)
            merged["cache_path"] = _resolve(base, merged["cache_path"])
            try:
                backends[name] = BackendConfig.from_dict(merged)
            except (BackendConfigError, TypeError) as exc:
                raise ConfigError(f"backend {name!r}: {exc}") from exc
        return cls(
            dataset_path=_resolve(base, dataset.get("path")),
            dataset_format=dataset.get("format", "canonical"),
            filter_nonempty=bool(dataset.get("filter_nonempty", False)),
            backends=backends,
            timeout_ms=int(sandbox.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
            max_rows=int(sandbox.get("max_rows", DEFAULT_MAX_ROWS)),
            comparison=data.get("comparison", "multiset"),
            concurrency=int(data.get("concurrency", 1)),
            cache_path=cache_path,
            output_dir=_resolve(base, data.get("output_dir", "out")),
            seed=int(data.get("seed", 0)),
            max_interpretations=int(data.get("max_interpretations", DEFAULT_MAX_INTERPRETATIONS)),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def backend_for(self, stage: str) -> BackendConfig | None:
        for name in (stage, STAGE_FALLBACKS.get(stage), "default"):
            if name and name in self.backends:
                return self.backends[name]
        return None

    def require(self, stages) -> None:
        missing = [s for s in stages if self.backend_for(s) is None]
        if missing:
            raise ConfigError(f"no backend configured for stage(s): {', '.join(missing)}")

    def gateway(self, stage: str) -> Gateway:
        """Gateway for ``stage``; its cache key namespace is the stage name."""
        if stage not in self._gateways:
            backend = self.backend_for(stage)
            if backend is None:
                raise ConfigError(f"no backend configured for stage {stage!r}")
            self._gateways[stage] = Gateway.from_config(stage, backend, open_cache(backend.cache_path))
        return self._gateways[stage]

    def sandbox(self) -> Sandbox:
        return Sandbox(limits=ExecutionLimits(self.timeout_ms, self.max_rows), mode=self.comparison)

    def pipeline_config(self, stages, **overrides) -> PipelineConfig:
        self.require(stages)
        gateways = {s: self.gateway(s) for s in stages if s in PIPELINE_STAGES}
        return PipelineConfig(
            text2sql=gateways.get("text2sql"),
            interp=gateways.get("interp"),
            infill=gateways.get("infill"),
            self_correct=gateways.get("self_correct"),
            end_to_end=gateways.get("end_to_end"),
            sandbox=self.sandbox(),
            max_interpretations=self.max_interpretations,
            seed=self.seed,
            **overrides,
        )
