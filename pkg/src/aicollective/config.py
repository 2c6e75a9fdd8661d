"""TOML run configuration.  One file fully determines a run.

Errors name the file and line of the offending key.
"""

import os
import re
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .party import RECIPROCAL_MODES, PartyConfig

DEFAULT_KEY_ENV = "AICOLLECTIVE_API_KEY"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    model: str = "scripted-persona"
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = DEFAULT_KEY_ENV
    temperature: float = 1.0
    top_p: float = 0.7
    context_tokens: int = 20000
    reserve_tokens: int = 1000


@dataclass(frozen=True)
class EmbeddingConfig:
    kind: str = "test"
    model: str = "text-embedding-3-large"
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = DEFAULT_KEY_ENV
    dimension: int = 3072


@dataclass(frozen=True)
class MetricsConfig:
    window: int = 10
    tight_threshold: int = 5
    distance: str = "cosine"


@dataclass(frozen=True)
class SentenceConfig:
    questions: tuple[int, ...] = (1, 2, 3, 4, 5)
    memory: str = "carry"
    coherence: str = "pass-through"
    word_match: str = "prefix"
    bridged_pairs: tuple[tuple[int, int], ...] | None = None
    bridged_pairs_file: str | None = None
    max_turns: int = 20


@dataclass(frozen=True)
class PggSection:
    endowment: str = "100"
    multiplier: str = "1.3"
    replications: int = 20
    max_reruns: int = 3
    memory: str = "sliding-window"
    settings: tuple[str, ...] = ("non-collective", "collective-A", "collective-B")
    pair_a: tuple[int, int] = (1, 10)
    pair_b: tuple[int, int] = (1, 6)
    chain_a: tuple[int, int, int] = (1, 10, 9)
    chain_b: tuple[int, int, int] = (1, 6, 8)
    models: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    party: PartyConfig = field(default_factory=PartyConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    sentence: SentenceConfig = field(default_factory=SentenceConfig)
    pgg: PggSection = field(default_factory=PggSection)
    source: str = field(default="<defaults>", compare=False)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("source")
        return _jsonable(d)

    def offline(self) -> "RunConfig":
        """Same run with scripted agents and the deterministic test embedder."""
        return replace(
            self,
            backend=replace(self.backend, kind="scripted"),
            embedding=replace(self.embedding, kind="test"),
        )

    def missing_credentials(self) -> list[str]:
        needed = []
        if self.backend.kind == "remote-model":
            needed.append(self.backend.api_key_env)
        if self.embedding.kind == "remote":
            needed.append(self.embedding.api_key_env)
        return sorted({k for k in needed if not os.environ.get(k)})


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _choice(*options: str) -> Callable[[Any], str]:
    def conv(v: Any) -> str:
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return conv


def _int(v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected an integer")
    return v


def _float(v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError("expected a number")
    return float(v)


def _str(v: Any) -> str:
    if not isinstance(v, str):
        raise ValueError("expected a string")
    return v


def _decimal_text(v: Any) -> str:
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ValueError("expected a number")
    text = str(v)
    if not re.fullmatch(r"\d+(\.\d+)?", text):
        raise ValueError("expected a non-negative decimal number")
    return text


def _int_tuple(n: int | None) -> Callable[[Any], tuple[int, ...]]:
    def conv(v: Any) -> tuple[int, ...]:
        if not isinstance(v, list) or (n is not None and len(v) != n):
            raise ValueError(f"expected a list of {n or 'some'} integers")
        return tuple(_int(x) for x in v)

    return conv


def _pairs(v: Any) -> tuple[tuple[int, int], ...]:
    if not isinstance(v, list):
        raise ValueError("expected a list of [a, b] pairs")
    return tuple(_int_tuple(2)(p) for p in v)


def _str_tuple(v: Any) -> tuple[str, ...]:
    if not isinstance(v, list):
        raise ValueError("expected a list of strings")
    return tuple(_str(x) for x in v)


_SCHEMA: dict[str, dict[str, Callable[[Any], Any]]] = {
    "run": {"seed": _int},
    "party": {
        "n_agents": _int,
        "n_rounds": _int,
        "max_turns_per_conversation": _int,
        "reciprocal": _choice(*RECIPROCAL_MODES),
    },
    "backend": {
        "kind": _choice("scripted", "remote-model"),
        "model": _str,
        "base_url": _str,
        "api_key_env": _str,
        "temperature": _float,
        "top_p": _float,
        "context_tokens": _int,
        "reserve_tokens": _int,
    },
    "embedding": {
        "kind": _choice("test", "remote"),
        "model": _str,
        "base_url": _str,
        "api_key_env": _str,
        "dimension": _int,
    },
    "metrics": {"window": _int, "tight_threshold": _int, "distance": _choice("cosine", "euclidean")},
    "sentence": {
        "questions": _int_tuple(None),
        "memory": _choice("carry", "fresh"),
        "coherence": _choice("pass-through", "judge"),
        "word_match": _choice("prefix", "exact"),
        "bridged_pairs": _pairs,
        "bridged_pairs_file": _str,
        "max_turns": _int,
    },
    "pgg": {
        "endowment": _decimal_text,
        "multiplier": _decimal_text,
        "replications": _int,
        "max_reruns": _int,
        "memory": _choice("sliding-window"),
        "settings": _str_tuple,
        "pair_a": _int_tuple(2),
        "pair_b": _int_tuple(2),
        "chain_a": _int_tuple(3),
        "chain_b": _int_tuple(3),
        "models": _str_tuple,
    },
}


def _locate(text: str, section: str, key: str | None) -> int:
    """1-based line of ``key`` inside ``[section]`` (or of the header itself)."""
    lines = text.splitlines()
    header = None
    for i, line in enumerate(lines):
        if re.match(rf"^\s*\[\s*{re.escape(section)}\s*\]", line):
            header = i
            break
    if header is None:
        return 1
    if key is None:
        return header + 1
    for j in range(header + 1, len(lines)):
        if re.match(r"^\s*\[", lines[j]):
            break
        if re.match(rf"^\s*{re.escape(key)}\s*=", lines[j]):
            return j + 1
    return header + 1


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    def fail(section: str, key: str | None, msg: str) -> ConfigError:
        return ConfigError(f"{source}:{_locate(text, section, key)}: {msg}")

    values: dict[str, dict[str, Any]] = {}
    for section, table in raw.items():
        if section not in _SCHEMA:
            raise fail(section, None, f"unknown section [{section}]")
        if not isinstance(table, dict):
            raise fail(section, None, f"[{section}] must be a table")
        values[section] = {}
        for key, value in table.items():
            if "api_key" == key or key.endswith("_secret"):
                raise fail(section, key, "credentials belong in the environment, not the config file")
            if key not in _SCHEMA[section]:
                raise fail(section, key, f"unknown key {section}.{key}")
            try:
                values[section][key] = _SCHEMA[section][key](value)
            except ValueError as exc:
                raise fail(section, key, f"{section}.{key}: {exc}") from None

    run = values.get("run", {})
    try:
        party = PartyConfig(seed=run.get("seed", 0), **values.get("party", {}))
    except ValueError as exc:
        raise fail("party", None, str(exc)) from None
    cfg = RunConfig(
        seed=run.get("seed", 0),
        party=party,
        backend=BackendConfig(**values.get("backend", {})),
        embedding=EmbeddingConfig(**values.get("embedding", {})),
        metrics=MetricsConfig(**values.get("metrics", {})),
        sentence=SentenceConfig(**values.get("sentence", {})),
        pgg=PggSection(**values.get("pgg", {})),
        source=source,
    )
    _check(cfg, fail)
    return cfg


def _check(cfg: RunConfig, fail):
    n = cfg.party.n_agents
    if cfg.metrics.window < 1:
        raise fail("metrics", "window", "metrics.window must be >= 1")
    if cfg.backend.reserve_tokens >= cfg.backend.context_tokens:
        raise fail("backend", "reserve_tokens", "backend.reserve_tokens must be below context_tokens")
    if not 0 < cfg.backend.top_p <= 1:
        raise fail("backend", "top_p", "backend.top_p must be in (0, 1]")
    if cfg.embedding.dimension < 2:
        raise fail("embedding", "dimension", "embedding.dimension must be >= 2")
    bad = [q for q in cfg.sentence.questions if not 1 <= q <= 5]
    if bad or not cfg.sentence.questions:
        raise fail("sentence", "questions", "sentence.questions must list ids between 1 and 5")
    for key in ("pair_a", "pair_b", "chain_a", "chain_b"):
        ids = getattr(cfg.pgg, key)
        if any(not 1 <= i <= n for i in ids) or len(set(ids)) != len(ids):
            raise fail("pgg", key, f"pgg.{key} must name distinct agents between 1 and {n}")
    for s in cfg.pgg.settings:
        if s not in ("non-collective", "collective-A", "collective-B"):
            raise fail("pgg", "settings", f"unknown pgg setting {s!r}")
    if cfg.pgg.replications < 1:
        raise fail("pgg", "replications", "pgg.replications must be positive")
    if cfg.sentence.bridged_pairs:
        for a, b in cfg.sentence.bridged_pairs:
            if a == b or not (1 <= a <= n and 1 <= b <= n):
                raise fail("sentence", "bridged_pairs", f"invalid bridged pair [{a}, {b}]")


def _tuples(x: Any) -> Any:
    return tuple(_tuples(v) for v in x) if isinstance(x, list) else x


def config_from_dict(d: dict[str, Any]) -> RunConfig:
    """Inverse of :meth:`RunConfig.to_dict` (used to replay a stored manifest)."""

    def section(cls, key):
        return cls(**{k: _tuples(v) for k, v in d.get(key, {}).items()})

    return RunConfig(
        seed=d.get("seed", 0),
        party=section(PartyConfig, "party"),
        backend=section(BackendConfig, "backend"),
        embedding=section(EmbeddingConfig, "embedding"),
        metrics=section(MetricsConfig, "metrics"),
        sentence=section(SentenceConfig, "sentence"),
        pgg=section(PggSection, "pgg"),
        source="<manifest>",
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config: {exc.strerror}") from None
    cfg = parse_config(text, str(p))
    if cfg.sentence.bridged_pairs_file:
        pairs_path = (p.parent / cfg.sentence.bridged_pairs_file).resolve()
        pairs = read_pairs_file(pairs_path)
        n = cfg.party.n_agents
        for a, b in pairs:
            if a == b or not (1 <= a <= n and 1 <= b <= n):
                raise ConfigError(f"{pairs_path}: invalid bridged pair {a},{b} for {n} agents")
        cfg = replace(cfg, sentence=replace(cfg.sentence, bridged_pairs=pairs))
    return cfg


def read_pairs_file(path: Path) -> tuple[tuple[int, int], ...]:
    """``a,b`` or ``La,Lb`` per line; blank lines and ``#`` comments skipped."""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read pair file: {exc.strerror}") from None
    pairs = []
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"L?(\d+)\s*[,\s-]\s*L?(\d+)", line)
        if not m:
            raise ConfigError(f"{path}:{no}: expected a pair like '1,5'")
        pairs.append((int(m.group(1)), int(m.group(2))))
    return tuple(pairs)
