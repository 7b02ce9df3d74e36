"""Run configuration and provider assembly.

Precedence is flag > config file > default. Secrets are read from the
environment only (``CWESCOUT_LLM_KEY``); endpoint URLs may also come from
``CWESCOUT_LLM_URL`` / ``CWESCOUT_EMBED_URL``, which override the file.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .corpus import DEFAULT_EXCLUDE, DEFAULT_INCLUDE, DEFAULT_K
from .llm import (
    Cassette,
    ChatProvider,
    GenerationParams,
    HttpChatProvider,
    RecordingProvider,
    ReplayProvider,
)
from .vectordb import (
    EmbeddingProvider,
    HttpEmbeddingProvider,
    RecordingEmbedder,
    ReplayEmbedder,
    TokenHashEmbedder,
)

__all__ = ["Config", "ConfigError", "ProviderSession", "load_config", "make_embedder"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    llm_url: str | None = None
    llm_model: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int | None = None
    seed: int | None = None
    embedder: str = "mock"
    embed_url: str | None = None
    embed_model: str = "all-MiniLM-L6-v2"
    embed_dim: int = 256
    k_chunk: int = DEFAULT_K
    k_retrieval: int = 5
    max_debate_iterations: int = 5
    include_globs: tuple[str, ...] = DEFAULT_INCLUDE
    exclude_globs: tuple[str, ...] = DEFAULT_EXCLUDE
    exclude_function: bool = False
    record: str | None = None
    replay: str | None = None
    single_agent: bool = False
    candidate_warning_threshold: int = 30

    def __post_init__(self):
        if self.embedder not in ("mock", "http"):
            raise ConfigError(f"embedder must be 'mock' or 'http', got {self.embedder!r}")
        for name in ("k_chunk", "k_retrieval", "max_debate_iterations", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.record and self.replay:
            raise ConfigError("record and replay are mutually exclusive")

    @property
    def generation_params(self) -> GenerationParams:
        return GenerationParams(self.llm_model, self.temperature, self.max_tokens, self.seed)

    def merged(self, overrides: Mapping[str, Any]) -> "Config":
        """Return a copy with every non-None override applied."""
        values = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(values) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("include_globs", "exclude_globs"):
            if key in values:
                values[key] = tuple(values[key])
        try:
            return replace(self, **values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["include_globs"] = list(self.include_globs)
        d["exclude_globs"] = list(self.exclude_globs)
        return d

    @classmethod
    def describe_defaults(cls) -> list[tuple[str, Any]]:
        default = cls()
        return [(f.name, getattr(default, f.name)) for f in fields(cls)]


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> Config:
    config = Config()
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        secrets = {k for k in data if "key" in k.lower() or "token" in k.lower()}
        if secrets:
            raise ConfigError(f"secrets are read from the environment only, not {sorted(secrets)}")
        config = config.merged(data)
    env = {
        "llm_url": os.environ.get("CWESCOUT_LLM_URL"),
        "embed_url": os.environ.get("CWESCOUT_EMBED_URL"),
    }
    config = config.merged(env)
    if overrides:
        config = config.merged(overrides)
    return config


def make_embedder(config: Config) -> EmbeddingProvider:
    if config.embedder == "mock":
        return TokenHashEmbedder(config.embed_dim)
    return HttpEmbeddingProvider(config.embed_url, config.embed_model)


def _cassette_path(base: str, sample_id: str | None) -> Path:
    p = Path(base)
    if sample_id is not None and (p.is_dir() or not p.suffix):
        return p / f"{sample_id}.cassette"
    return p


@dataclass
class ProviderSession:
    """LLM and embedder for one scan, wired for live, record or replay use.

    ``sample_id`` selects ``<dir>/<sample_id>.cassette`` when the record or
    replay path is a directory. ``llm`` replaces the live chat provider
    (it is still wrapped for recording).
    """

    config: Config
    sample_id: str | None = None
    llm: ChatProvider | None = None
    embedder: EmbeddingProvider | None = None
    cassette: Cassette | None = field(default=None, init=False)
    cassette_path: Path | None = field(default=None, init=False)

    def __post_init__(self):
        cfg = self.config
        if cfg.replay:
            self.cassette_path = _cassette_path(cfg.replay, self.sample_id)
            self.cassette = Cassette.load(self.cassette_path)
            self.llm = ReplayProvider(self.cassette)
            records = self.cassette.meta.get("embeddings")
            if records:
                self.embedder = ReplayEmbedder(
                    records, self.cassette.meta.get("embedder_fingerprint", "unknown"), cfg.embed_model
                )
            elif self.embedder is None:
                self.embedder = self._make_embedder()
            return
        if self.llm is None:
            self.llm = HttpChatProvider(url=cfg.llm_url)
        if self.embedder is None:
            self.embedder = self._make_embedder()
        if cfg.record:
            self.cassette_path = _cassette_path(cfg.record, self.sample_id)
            self.llm = RecordingProvider(self.llm)
            if not isinstance(self.embedder, TokenHashEmbedder):
                self.embedder = RecordingEmbedder(self.embedder)

    def _make_embedder(self) -> EmbeddingProvider:
        return make_embedder(self.config)

    @property
    def recording(self) -> bool:
        return isinstance(self.llm, RecordingProvider)

    def save(self, meta: Mapping[str, Any] | None = None) -> Path | None:
        """Write the cassette when recording; return its path."""
        if not self.recording:
            return None
        meta = dict(meta or {})
        meta["embedder_fingerprint"] = self.embedder.fingerprint
        if isinstance(self.embedder, RecordingEmbedder):
            meta["embeddings"] = self.embedder.export()
        self.llm.save(self.cassette_path, meta)
        return self.cassette_path
