"""Benchmark run configuration: a flat YAML mapping of documented keys."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import yaml

from ..errors import ConfigurationError
from ..transport import contiguous_node_map, validate_node_map

PATTERN_ALGORITHMS = {
    "alltoallv-uniform": ("pairwise", "nonblocking-batch", "hierarchical"),
    "alltoallv-random": ("pairwise", "nonblocking-batch", "hierarchical"),
    "allgather": ("ring", "bruck", "hierarchical"),
    "stencil5": ("neighbor-standard", "neighbor-locality"),
    "random-sparse-graph": ("neighbor-standard", "neighbor-locality"),
    "partitioned": ("partitioned", "p2p"),
}


@dataclass
class RunConfig:
    ranks: int
    pattern: str
    ppn: int | None = None
    node_map: list[int] | None = None
    algorithms: list[str] = field(default_factory=list)
    seed: int = 0
    trials: int = 1
    cycles: int = 1
    width: int = 4
    count: int = 4
    max_count: int = 8
    degree: int = 2
    duplication: int = 1
    partitions_send: int = 4
    partitions_recv: int = 4
    background: bool = True
    timeout_s: float = 30.0
    verify: bool = True
    out: str | None = None

    @property
    def nodes(self) -> list[int]:
        """Resolved rank->node table; an explicit map wins over ppn."""
        if self.node_map is not None:
            return list(self.node_map)
        return contiguous_node_map(self.ranks, self.ppn or self.ranks)

    @property
    def n_nodes(self) -> int:
        return max(self.nodes) + 1


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
REQUIRED = ("ranks", "pattern")


class ConfigError(ConfigurationError):
    def __init__(self, key: str | None, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        what = f"field '{key}': " if key else ""
        super().__init__(f"{where}{what}{message}")
        self.key = key
        self.line = line


def _coerce(key: str, value: Any, line: int | None) -> Any:
    def bad(expected):
        raise ConfigError(key, f"expected {expected}, got {value!r}", line)

    if key in ("pattern", "out"):
        if not isinstance(value, str):
            bad("a string")
        return value
    if key == "algorithms":
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            bad("a list of algorithm names")
        return list(value)
    if key == "node_map":
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            bad("a list of node ids")
        return list(value)
    if key in ("background", "verify"):
        if not isinstance(value, bool):
            bad("true or false")
        return value
    if key == "timeout_s":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
            bad("a positive number")
        return float(value)
    if isinstance(value, bool) or not isinstance(value, int):
        bad("an integer")
    return value


def build_config(values: dict[str, Any], lines: dict[str, int] | None = None) -> RunConfig:
    """Validate a raw key->value mapping and fill defaults."""
    lines = lines or {}
    for key in values:
        if key not in FIELDS:
            raise ConfigError(key, "unknown key", lines.get(key))
    for key in REQUIRED:
        if values.get(key) is None:
            raise ConfigError(key, "required", None)
    clean = {k: _coerce(k, v, lines.get(k)) for k, v in values.items() if v is not None}
    cfg = RunConfig(**clean)

    def err(key, msg):
        raise ConfigError(key, msg, lines.get(key))

    if cfg.ranks <= 0:
        err("ranks", "must be positive")
    if cfg.node_map is not None:
        try:
            validate_node_map(cfg.node_map, cfg.ranks)
        except ConfigurationError as exc:
            err("node_map", str(exc))
    elif cfg.ppn is not None:
        if cfg.ppn <= 0:
            err("ppn", "must be positive")
        if cfg.ranks % cfg.ppn:
            err("ppn", f"ranks={cfg.ranks} is not divisible by ppn={cfg.ppn}")
    if cfg.pattern not in PATTERN_ALGORITHMS:
        err("pattern", f"unknown pattern, choose from {sorted(PATTERN_ALGORITHMS)}")
    allowed = PATTERN_ALGORITHMS[cfg.pattern]
    if not cfg.algorithms:
        cfg.algorithms = list(allowed)
    for a in cfg.algorithms:
        if a not in allowed:
            err("algorithms", f"{a!r} does not apply to pattern {cfg.pattern}; choose from {list(allowed)}")
    for key in ("trials", "cycles", "width", "partitions_send", "partitions_recv", "duplication"):
        if getattr(cfg, key) < 1:
            err(key, "must be at least 1")
    for key in ("count", "max_count", "degree", "seed"):
        if getattr(cfg, key) < 0:
            err(key, "must be non-negative")
    if cfg.pattern == "partitioned":
        total = cfg.partitions_send * cfg.count
        if total % cfg.partitions_recv:
            err("partitions_recv", f"{total} elements do not split into {cfg.partitions_recv} partitions")
    return cfg


def parse_config_text(text: str) -> tuple[dict[str, Any], dict[str, int]]:
    """Parse YAML text into a flat mapping plus the 1-based line of every key."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(None, f"not valid YAML: {exc}", mark.line + 1 if mark else None) from None
    if root is None:
        return {}, {}
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(None, "top level must be a mapping of key: value", root.start_mark.line + 1)
    lines = {}
    for key_node, value_node in root.value:
        if isinstance(value_node, yaml.MappingNode):
            raise ConfigError(key_node.value, "nested mappings are not allowed",
                              key_node.start_mark.line + 1)
        lines[key_node.value] = key_node.start_mark.line + 1
    values = yaml.safe_load(text)
    return values, lines


def load_config(path, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a config file; non-None ``overrides`` take precedence over file values."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(None, f"cannot read {path}: {exc.strerror}") from None
    values, lines = parse_config_text(text)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
            lines.pop(key, None)
    return build_config(values, lines)
