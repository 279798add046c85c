"""Run configuration: YAML schema, validation, hashing.

Relative paths resolve against the config file's directory. Credentials never
appear here; the HTTP backend reads LLM_API_KEY from the environment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .corpus import TokenCounter, make_byte_ratio_counter, whitespace_token_counter
from .llm import BackendConfig, BackendError, RetryPolicy
from .prompts import PromptLibrary
from .strategies import (
    Bm25Params,
    ContextKind,
    ContextSpec,
    GenerationSettings,
    ModeKind,
    ReasoningMode,
)
from .trace import TraceFormat

BACKEND_ROLES = ("generator", "reasoner", "judge", "checker", "answerer")
# Field names that smell like embedded credentials; always rejected.
_SECRET_KEYS = {"api_key", "apikey", "token", "secret", "password", "authorization"}


class ConfigError(Exception):
    pass


def _require_mapping(value: Any, where: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
    return value


def _check_keys(data: dict, allowed: set[str], where: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")


def _get_str(data: dict, key: str, where: str, default: str | None = None) -> str | None:
    value = data.get(key, default)
    if value is None:
        return None
    if not isinstance(value, str):
        raise ConfigError(f"{where}.{key}: expected a string")
    return value


def _get_int(data: dict, key: str, where: str, default: int | None = None) -> int | None:
    value = data.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}.{key}: expected an integer")
    return value


def _get_float(data: dict, key: str, where: str, default: float | None = None) -> float | None:
    value = data.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number")
    return float(value)


def _get_bool(data: dict, key: str, where: str, default: bool | None = None) -> bool | None:
    value = data.get(key, default)
    if value is None:
        return None
    if not isinstance(value, bool):
        raise ConfigError(f"{where}.{key}: expected a boolean")
    return value


@dataclass
class PathsConfig:
    books: Path
    tasks: Path
    output_dir: Path


@dataclass
class RewardServeConfig:
    reference_store: Optional[Path] = None
    bind: str = "127.0.0.1:8080"


@dataclass
class EvaluationConfig:
    nli_chunk_tokens: int = 1024


@dataclass
class SignificanceConfig:
    n_permutations: int = 10_000
    seed: int = 0


@dataclass
class RunConfig:
    paths: PathsConfig
    strategy: ContextSpec
    mode: ReasoningMode
    backends: dict[str, BackendConfig]
    seeds: list[int] = field(default_factory=lambda: [0])
    counter_kind: str = "whitespace"
    byte_ratio: int = 4
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    target_words: Optional[int] = None
    corpus_style: Optional[str] = None
    prompt_overrides: dict[str, Path] = field(default_factory=dict)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    reward: RewardServeConfig = field(default_factory=RewardServeConfig)
    significance: SignificanceConfig = field(default_factory=SignificanceConfig)
    max_parallel_tasks: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    # -- loading ------------------------------------------------------------

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if data is None:
            raise ConfigError(f"{path}: config file is empty")
        return cls.from_dict(_require_mapping(data, str(path)), base_dir=path.parent)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "RunConfig":
        base = Path(base_dir)
        _check_keys(
            data,
            {
                "paths", "strategy", "mode", "trace_format", "backends", "seeds",
                "token_counter", "generation", "target_words", "corpus_style",
                "prompts", "evaluation", "reward", "significance", "max_parallel_tasks",
            },
            "config",
        )

        paths_data = _require_mapping(data.get("paths"), "config.paths")
        _check_keys(paths_data, {"books", "tasks", "output_dir"}, "config.paths")
        for key in ("books", "tasks", "output_dir"):
            if _get_str(paths_data, key, "config.paths") is None:
                raise ConfigError(f"config.paths.{key} is required")
        paths = PathsConfig(
            books=base / paths_data["books"],
            tasks=base / paths_data["tasks"],
            output_dir=base / paths_data["output_dir"],
        )

        strategy = cls._parse_strategy(data.get("strategy"))
        trace_format = cls._parse_trace_format(data.get("trace_format"))
        mode = cls._parse_mode(data.get("mode"), trace_format)
        backends = cls._parse_backends(data.get("backends"), base)

        seeds = data.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds
        ):
            raise ConfigError("config.seeds: expected a non-empty list of integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("config.seeds: duplicate seeds")

        counter_data = _require_mapping(data.get("token_counter", {}), "config.token_counter")
        _check_keys(counter_data, {"kind", "byte_ratio"}, "config.token_counter")
        counter_kind = _get_str(counter_data, "kind", "config.token_counter", "whitespace")
        if counter_kind not in ("whitespace", "byte_ratio"):
            raise ConfigError(
                f"config.token_counter.kind: expected whitespace or byte_ratio, got {counter_kind!r}"
            )
        byte_ratio = _get_int(counter_data, "byte_ratio", "config.token_counter", 4)
        if byte_ratio < 1:
            raise ConfigError("config.token_counter.byte_ratio must be >= 1")

        gen_data = _require_mapping(data.get("generation", {}), "config.generation")
        _check_keys(gen_data, {"temperature", "max_new_tokens"}, "config.generation")
        generation = GenerationSettings(
            temperature=_get_float(gen_data, "temperature", "config.generation", 0.4),
            max_new_tokens=_get_int(gen_data, "max_new_tokens", "config.generation", 1024),
        )

        target_words = _get_int(data, "target_words", "config")
        if target_words is not None and target_words < 1:
            raise ConfigError("config.target_words must be >= 1")
        corpus_style = _get_str(data, "corpus_style", "config")

        prompt_overrides: dict[str, Path] = {}
        for name, value in _require_mapping(data.get("prompts", {}), "config.prompts").items():
            if not isinstance(value, str):
                raise ConfigError(f"config.prompts.{name}: expected a file path string")
            prompt_overrides[name] = base / value

        eval_data = _require_mapping(data.get("evaluation", {}), "config.evaluation")
        _check_keys(eval_data, {"nli_chunk_tokens"}, "config.evaluation")
        evaluation = EvaluationConfig(
            nli_chunk_tokens=_get_int(eval_data, "nli_chunk_tokens", "config.evaluation", 1024)
        )
        if evaluation.nli_chunk_tokens < 1:
            raise ConfigError("config.evaluation.nli_chunk_tokens must be >= 1")

        reward_data = _require_mapping(data.get("reward", {}), "config.reward")
        _check_keys(reward_data, {"reference_store", "bind"}, "config.reward")
        store = _get_str(reward_data, "reference_store", "config.reward")
        reward = RewardServeConfig(
            reference_store=base / store if store else None,
            bind=_get_str(reward_data, "bind", "config.reward", "127.0.0.1:8080"),
        )

        sig_data = _require_mapping(data.get("significance", {}), "config.significance")
        _check_keys(sig_data, {"n_permutations", "seed"}, "config.significance")
        significance = SignificanceConfig(
            n_permutations=_get_int(sig_data, "n_permutations", "config.significance", 10_000),
            seed=_get_int(sig_data, "seed", "config.significance", 0),
        )
        if significance.n_permutations < 1:
            raise ConfigError("config.significance.n_permutations must be >= 1")

        max_parallel = _get_int(data, "max_parallel_tasks", "config", 1)
        if max_parallel < 1:
            raise ConfigError("config.max_parallel_tasks must be >= 1")

        return cls(
            paths=paths,
            strategy=strategy,
            mode=mode,
            backends=backends,
            seeds=list(seeds),
            counter_kind=counter_kind,
            byte_ratio=byte_ratio,
            generation=generation,
            target_words=target_words,
            corpus_style=corpus_style,
            prompt_overrides=prompt_overrides,
            evaluation=evaluation,
            reward=reward,
            significance=significance,
            max_parallel_tasks=max_parallel,
            raw=data,
        )

    @staticmethod
    def _parse_strategy(value: Any) -> ContextSpec:
        data = _require_mapping(value if value is not None else {"kind": "no_context"}, "config.strategy")
        _check_keys(
            data,
            {"kind", "context_budget_tokens", "retrieval_chunk_tokens", "process_chunk_tokens", "bm25"},
            "config.strategy",
        )
        kind_name = _get_str(data, "kind", "config.strategy")
        if kind_name is None:
            raise ConfigError("config.strategy.kind is required")
        bm25_data = _require_mapping(data.get("bm25", {}), "config.strategy.bm25")
        _check_keys(bm25_data, {"k1", "b"}, "config.strategy.bm25")
        bm25 = Bm25Params(
            k1=_get_float(bm25_data, "k1", "config.strategy.bm25", 1.2),
            b=_get_float(bm25_data, "b", "config.strategy.bm25", 0.75),
        )
        if bm25.k1 < 0 or not 0 <= bm25.b <= 1:
            raise ConfigError("config.strategy.bm25: need k1 >= 0 and 0 <= b <= 1")
        return ContextSpec(
            kind=ContextKind.parse(kind_name),
            context_budget_tokens=_get_int(data, "context_budget_tokens", "config.strategy", 32_000),
            retrieval_chunk_tokens=_get_int(data, "retrieval_chunk_tokens", "config.strategy", 512),
            process_chunk_tokens=_get_int(data, "process_chunk_tokens", "config.strategy", 16_000),
            bm25=bm25,
        )

    @staticmethod
    def _parse_trace_format(value: Any) -> TraceFormat:
        data = _require_mapping(value if value is not None else {}, "config.trace_format")
        _check_keys(data, {"include_explanation", "include_type", "include_answer"}, "config.trace_format")
        return TraceFormat(
            include_explanation=_get_bool(data, "include_explanation", "config.trace_format", True),
            include_type=_get_bool(data, "include_type", "config.trace_format", True),
            include_answer=_get_bool(data, "include_answer", "config.trace_format", True),
        )

    @staticmethod
    def _parse_mode(value: Any, trace_format: TraceFormat) -> ReasoningMode:
        data = _require_mapping(value if value is not None else {"kind": "no_trace"}, "config.mode")
        _check_keys(data, {"kind", "think_open", "think_close"}, "config.mode")
        kind_name = _get_str(data, "kind", "config.mode")
        if kind_name is None:
            raise ConfigError("config.mode.kind is required")
        return ReasoningMode(
            kind=ModeKind.parse(kind_name),
            trace_format=trace_format,
            think_open=_get_str(data, "think_open", "config.mode", "<think>"),
            think_close=_get_str(data, "think_close", "config.mode", "</think>"),
        )

    @staticmethod
    def _parse_backends(value: Any, base: Path) -> dict[str, BackendConfig]:
        data = _require_mapping(value if value is not None else {}, "config.backends")
        _check_keys(data, set(BACKEND_ROLES), "config.backends")
        backends: dict[str, BackendConfig] = {}
        for role, entry in data.items():
            where = f"config.backends.{role}"
            entry = _require_mapping(entry, where)
            secrets = {k for k in entry if k.lower() in _SECRET_KEYS}
            if secrets:
                raise ConfigError(
                    f"{where}: credentials are not allowed in config files "
                    f"(found {sorted(secrets)}); set the LLM_API_KEY environment variable"
                )
            _check_keys(
                entry,
                {
                    "kind", "model_name", "base_url", "max_concurrency",
                    "timeout_ms", "script_path", "supports_prefill", "retry",
                },
                where,
            )
            kind = _get_str(entry, "kind", where)
            if kind is None:
                raise ConfigError(f"{where}.kind is required")
            retry_data = _require_mapping(entry.get("retry", {}), f"{where}.retry")
            _check_keys(retry_data, {"max_attempts", "base_backoff_ms"}, f"{where}.retry")
            retry = RetryPolicy(
                max_attempts=_get_int(retry_data, "max_attempts", f"{where}.retry", 3),
                base_backoff_ms=_get_int(retry_data, "base_backoff_ms", f"{where}.retry", 200),
            )
            script = _get_str(entry, "script_path", where)
            config = BackendConfig(
                kind=kind,
                model_name=_get_str(entry, "model_name", where, "") or "",
                base_url=_get_str(entry, "base_url", where),
                max_concurrency=_get_int(entry, "max_concurrency", where, 4),
                retry=retry,
                timeout_ms=_get_int(entry, "timeout_ms", where, 30_000),
                script_path=str(base / script) if script else None,
                supports_prefill=_get_bool(entry, "supports_prefill", where, True),
            )
            try:
                config.validate()
            except (BackendError, ValueError) as exc:
                raise ConfigError(f"{where}: {exc}") from exc
            backends[role] = config
        return backends

    # -- derived helpers ----------------------------------------------------

    def counter(self) -> TokenCounter:
        if self.counter_kind == "byte_ratio":
            return make_byte_ratio_counter(self.byte_ratio)
        return whitespace_token_counter

    def prompt_library(self) -> PromptLibrary:
        if not self.prompt_overrides:
            return PromptLibrary()
        missing = [str(p) for p in self.prompt_overrides.values() if not Path(p).is_file()]
        if missing:
            raise ConfigError(f"prompt override files not found: {missing}")
        try:
            return PromptLibrary.from_overrides(dict(self.prompt_overrides))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, ensure_ascii=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    # -- validation ---------------------------------------------------------

    def validate_for_run(self) -> None:
        for label, path in (("books", self.paths.books), ("tasks", self.paths.tasks)):
            if not Path(path).is_file():
                raise ConfigError(f"config.paths.{label}: no such file: {path}")
        if "generator" not in self.backends:
            raise ConfigError("config.backends.generator is required to run")
        if self.mode.kind is ModeKind.GUIDED_QA and "reasoner" not in self.backends:
            raise ConfigError("guided_qa mode needs config.backends.reasoner")
        self.strategy.validate()
        self.prompt_library()

    def validate_for_evaluate(self) -> None:
        for role in ("judge", "checker", "answerer"):
            if role not in self.backends:
                raise ConfigError(f"config.backends.{role} is required to evaluate")
        if not Path(self.paths.books).is_file():
            raise ConfigError(f"config.paths.books: no such file: {self.paths.books}")
        if not Path(self.paths.tasks).is_file():
            raise ConfigError(f"config.paths.tasks: no such file: {self.paths.tasks}")
        self.prompt_library()
