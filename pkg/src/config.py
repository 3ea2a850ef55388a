import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from agents import Ablation, AgentId
from backends import DEFAULT_ENDPOINT, DEFAULT_MODEL


class BackendSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["openai", "mock"] = "openai"
    endpoint: str = DEFAULT_ENDPOINT
    model: str = DEFAULT_MODEL
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = Field(60.0, gt=0)
    max_in_flight: int = Field(4, ge=1)
    requests_per_second: float = Field(2.0, ge=0)
    script: Optional[Path] = None

    def api_key(self) -> Optional[str]:
        """Read from the environment at call time; never stored on the settings object."""
        return os.environ.get(self.api_key_env) or None


class PipelineSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k_related: int = Field(5, ge=1)
    path_cap: int = Field(50, ge=1)
    max_tokens: int = Field(512, ge=1)
    report_token_budget: int = Field(300, ge=1)
    default_temperature: float = Field(0.0, ge=0)
    temperatures: Dict[str, float] = Field(default_factory=dict)
    fingerprint_radius: int = Field(2, ge=0)
    fingerprint_width: int = 2048
    ablation: Ablation = Ablation.FULL
    kg_fraction: float = Field(1.0, gt=0, le=1)
    annotation_fraction: float = Field(1.0, gt=0, le=1)
    prune_seed: int = 0

    @field_validator("temperatures")
    @classmethod
    def _known_agents(cls, value: Dict[str, float]) -> Dict[str, float]:
        known = {agent.value for agent in AgentId}
        unknown = sorted(set(value) - known)
        if unknown:
            raise ValueError(f"Unknown agents in temperatures: {unknown}; expected any of {sorted(known)}")
        if any(t < 0 for t in value.values()):
            raise ValueError("Temperatures must be >= 0")
        return value

    @field_validator("fingerprint_width")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value < 64 or value & (value - 1):
            raise ValueError(f"fingerprint_width must be a power of two >= 64, got {value}")
        return value

    def temperature_for(self, agent: AgentId) -> float:
        return self.temperatures.get(agent.value, self.default_temperature)


class DataPaths(BaseModel):
    """Locations of snapshots, caches and logs; unset entries default to files inside the workspace."""

    model_config = ConfigDict(extra="forbid")

    workspace: Path = Path(".molrag")
    kg_snapshot: Optional[Path] = None
    annotation_snapshot: Optional[Path] = None
    embeddings: Optional[Path] = None
    trace_log: Optional[Path] = None
    cache_dir: Optional[Path] = None
    captioning_command: Optional[str] = None
    captioning_table: Optional[Path] = None
    target_aliases: Optional[Path] = None

    @model_validator(mode="after")
    def _fill_workspace_defaults(self) -> "DataPaths":
        defaults = {
            "kg_snapshot": "kg",
            "annotation_snapshot": "annotations.tsv",
            "embeddings": "embeddings.npz",
            "trace_log": "traces.jsonl",
            "cache_dir": "cache",
        }
        for name, default in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, self.workspace / default)
        return self

    def resolved(self, base: Path) -> "DataPaths":
        data = {}
        for name, value in self.model_dump().items():
            if isinstance(value, Path) and not value.is_absolute():
                value = (base / value).resolve()
            data[name] = value
        return DataPaths.model_validate(data)

    def ensure_exist(self, *names: str) -> None:
        """Validate that the named data files exist."""
        for name in names:
            path = getattr(self, name)
            if path is None or not Path(path).exists():
                raise FileNotFoundError(f"Required data file not found: {name} at {path}")


class EngineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backend: BackendSettings = Field(default_factory=BackendSettings)
    pipeline: PipelineSettings = Field(default_factory=PipelineSettings)
    paths: DataPaths = Field(default_factory=DataPaths)
    parallelism: int = Field(4, ge=1)
    tasks: List[Dict[str, Any]] = Field(default_factory=list)

    @classmethod
    def from_yaml(cls, path: Path) -> "EngineConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as infile:
            data = yaml.safe_load(infile) or {}
        return cls.model_validate(data).resolved(path.resolve().parent)

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "EngineConfig":
        if path is None:
            return cls().resolved(Path.cwd())
        return cls.from_yaml(path)

    def resolved(self, base: Path) -> "EngineConfig":
        backend = self.backend
        if backend.script is not None and not backend.script.is_absolute():
            backend = backend.model_copy(update={"script": (base / backend.script).resolve()})
        return self.model_copy(update={"backend": backend, "paths": self.paths.resolved(base)})

    def with_overrides(self, overrides: Dict[str, Any], base: Optional[Path] = None) -> "EngineConfig":
        """Apply dotted-key overrides (``backend.model``, ``pipeline.k_related``, ``parallelism``); None is skipped."""
        data = self.model_dump()
        for dotted, value in overrides.items():
            if value is None:
                continue
            target = data
            *parents, leaf = dotted.split(".")
            for parent in parents:
                target = target[parent]
            if leaf not in target:
                raise KeyError(f"Unknown config key {dotted!r}")
            target[leaf] = value
        return EngineConfig.model_validate(data).resolved(base or Path.cwd())
