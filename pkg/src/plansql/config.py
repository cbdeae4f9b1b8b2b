"""Run configuration: structured config file plus CLI overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .planner import PlannerConfig
from .retrieval import RetrievalConfig
from .sql_agent import SqlAgentConfig


@dataclass
class AblationFlags:
    no_planner: bool = False
    no_guidelines: bool = False
    no_icl: bool = False
    single_plan: bool = False

    def to_dict(self) -> dict:
        return {
            "no_planner": self.no_planner,
            "no_guidelines": self.no_guidelines,
            "no_icl": self.no_icl,
            "single_plan": self.single_plan,
        }


@dataclass
class RunConfig:
    splits: dict[str, Path]
    databases_dir: Path
    model_name: str = "mock-model"
    gateway_backend: str = "mock"  # mock | live
    mock_script: Path | None = None
    endpoint: str = ""
    credential_env: str = "PLANSQL_API_KEY"
    embedder_backend: str = "lexical_fallback"
    embedder_options: dict = field(default_factory=dict)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    sql_agent: SqlAgentConfig = field(default_factory=SqlAgentConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    split: str = "dev"
    out_dir: Path | None = None
    prompt_snapshot: Path | None = None
    parallelism: int = 0  # 0 means "number of processors"
    timeout_ms: int = 30_000

    def __post_init__(self):
        if self.parallelism == 0:
            self.parallelism = os.cpu_count() or 1
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.gateway_backend not in ("mock", "live"):
            raise ConfigError(f"unknown gateway backend {self.gateway_backend!r}")
        if self.gateway_backend == "mock" and not self.mock_script:
            raise ConfigError("mock backend requires a mock_script path")
        if self.gateway_backend == "live" and not self.endpoint:
            raise ConfigError("live backend requires an endpoint")
        # single_plan disables plan diversification outright
        if self.flags.single_plan and self.planner.num_plans != 1:
            self.planner = replace(self.planner, num_plans=1)

    def validate_files(self) -> None:
        if self.split not in self.splits:
            raise ConfigError(f"split {self.split!r} not configured (have {sorted(self.splits)})")
        for name, path in self.splits.items():
            if not Path(path).is_file():
                raise ConfigError(f"split file for {name!r} not found: {path}")
        if not Path(self.databases_dir).is_dir():
            raise ConfigError(f"databases_dir not found: {self.databases_dir}")
        if self.mock_script and not Path(self.mock_script).is_file():
            raise ConfigError(f"mock script not found: {self.mock_script}")
        if self.prompt_snapshot and not Path(self.prompt_snapshot).is_dir():
            raise ConfigError(f"prompt snapshot not found: {self.prompt_snapshot}")

    def ablation_dict(self) -> dict:
        flags = self.flags.to_dict()
        flags["zh_mode"] = self.planner.zh_mode
        return flags

    def to_snapshot(self) -> dict:
        return {
            "splits": {k: str(v) for k, v in self.splits.items()},
            "databases_dir": str(self.databases_dir),
            "model_name": self.model_name,
            "gateway_backend": self.gateway_backend,
            "mock_script": str(self.mock_script) if self.mock_script else None,
            "endpoint": self.endpoint,
            "credential_env": self.credential_env,
            "embedder_backend": self.embedder_backend,
            "planner": {
                "temperature": self.planner.temperature,
                "num_plans": self.planner.num_plans,
                "zh_mode": self.planner.zh_mode,
            },
            "sql_agent": {
                "temperature": self.sql_agent.temperature,
                "icl_enabled": self.sql_agent.icl_enabled,
            },
            "retrieval": {
                "schema_top_k": self.retrieval.schema_top_k,
                "icl_top_m": self.retrieval.icl_top_m,
            },
            "ablation_flags": self.ablation_dict(),
            "split": self.split,
            "prompt_snapshot": str(self.prompt_snapshot) if self.prompt_snapshot else None,
            "parallelism": self.parallelism,
            "timeout_ms": self.timeout_ms,
        }


def load_config(path, **overrides) -> RunConfig:
    """Load a YAML run config; keyword overrides win over file values.

    Relative paths in the file resolve against the file's directory.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    base_dir = path.parent

    def resolve(p):
        return (base_dir / p).resolve() if p else None

    datasets = raw.get("datasets", {})
    splits = {name: resolve(p) for name, p in datasets.items()}
    gateway = raw.get("gateway", {})
    planner_raw = raw.get("planner", {})
    sql_raw = raw.get("sql_agent", {})
    retrieval_raw = raw.get("retrieval", {})
    embedder_raw = raw.get("embedder", {})

    try:
        config = RunConfig(
            splits=splits,
            databases_dir=resolve(raw.get("databases_dir")) or Path("."),
            model_name=raw.get("model_name", "mock-model"),
            gateway_backend=overrides.pop("gateway_backend", gateway.get("backend", "mock")),
            mock_script=overrides.pop("mock_script", None) or resolve(gateway.get("mock_script")),
            endpoint=gateway.get("endpoint", ""),
            credential_env=gateway.get("credential_env", "PLANSQL_API_KEY"),
            embedder_backend=embedder_raw.get("backend", "lexical_fallback"),
            embedder_options={k: v for k, v in embedder_raw.items() if k != "backend"},
            planner=PlannerConfig(
                temperature=planner_raw.get("temperature", 0.7),
                num_plans=planner_raw.get("num_plans", 3),
                zh_mode=overrides.pop("zh_mode", None) or planner_raw.get("zh_mode", "direct"),
            ),
            sql_agent=SqlAgentConfig(
                temperature=sql_raw.get("temperature", 0.0),
                icl_enabled=sql_raw.get("icl_enabled", True),
            ),
            retrieval=RetrievalConfig(
                schema_top_k=retrieval_raw.get("schema_top_k", 5),
                icl_top_m=retrieval_raw.get("icl_top_m", 3),
            ),
            flags=overrides.pop("flags", None) or AblationFlags(),
            split=overrides.pop("split", None) or raw.get("split", "dev"),
            out_dir=overrides.pop("out_dir", None),
            prompt_snapshot=overrides.pop("prompt_snapshot", None)
            or resolve(raw.get("prompt_snapshot")),
            parallelism=overrides.pop("parallelism", None) or raw.get("parallelism", 0),
            timeout_ms=raw.get("timeout_ms", 30_000),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    if overrides:
        raise ConfigError(f"unknown config overrides: {sorted(overrides)}")
    return config
