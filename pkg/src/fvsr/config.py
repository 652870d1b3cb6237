"""Benchmark configuration: a flat ``key = value`` text format with sections.

Parse rules:

* ``[section]`` headers; ``key = value`` lines; ``#`` or ``;`` starts a
  full-line comment. Keys are case-insensitive; values are stripped.
* Integers are decimal; floats use Python float syntax; booleans are
  exactly ``true`` or ``false``; lists are comma-separated.
* Unknown sections or keys are rejected, as are repeated keys.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .kv_stream import EvictionStrategy, StreamConfig, ToyDiTConfig
from .lr_projin import ProjInConfig
from .masks import BoundaryMode

LOCALITY_MODES = {"off": None, "preserved": BoundaryMode.PRESERVED, "truncated": BoundaryMode.TRUNCATED}

def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    if s not in ("true", "false"):
        raise ValueError(f"expected true/false, got {s!r}")
    return s == "true"


def _opt_float(s: str):
    return None if s in ("", "none") else float(s)


# section -> key -> value parser; keys double as BenchConfig field names
SCHEMA = {
    "grid": {"frames": int, "height": int, "width": int},
    "attention": {"heads": int, "head_dim": int, "topk": int, "density": _opt_float,
                  "locality": str, "extent": int},
    "stream": {"window": int, "evict": str, "frames_per_step": int, "n_frames": int, "layers": int},
    "run": {"seeds": _ints, "repetitions": int, "threads": int},
    "debug": {"corrupt_eviction": _bool},
}


@dataclass(frozen=True)
class BenchConfig:
    frames: int = 4
    height: int = 16
    width: int = 16
    heads: int = 4
    head_dim: int = 32
    topk: int = 4
    density: float | None = None
    locality: str = "off"
    extent: int = 5
    window: int = 8
    evict: str = "sliding"
    frames_per_step: int = 2
    n_frames: int = 12
    layers: int = 4
    seeds: tuple[int, ...] = (0, 1, 2)
    repetitions: int = 5
    threads: int = 0
    corrupt_eviction: bool = False

    def __post_init__(self):
        if self.locality not in LOCALITY_MODES:
            raise ConfigError(f"locality must be one of {sorted(LOCALITY_MODES)}")
        try:
            EvictionStrategy.parse(self.evict)
        except ValueError as exc:
            raise ConfigError(f"unknown eviction strategy {self.evict!r}") from exc
        if min(self.frames, self.height, self.width, self.heads, self.head_dim, self.topk) < 1:
            raise ConfigError("sizes must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.stream_config()  # every referenced module config must validate

    def stream_config(self, **over) -> StreamConfig:
        cfg = replace(self, **over) if over else self
        mode = LOCALITY_MODES[cfg.locality]
        extent = None
        if mode is not None:
            extent = (min(cfg.extent, cfg.height), min(cfg.extent, cfg.width))
        model = ToyDiTConfig(n_layers=cfg.layers, n_heads=cfg.heads, head_dim=cfg.head_dim, seed=cfg.seeds[0])
        projin = ProjInConfig(model_dim=model.model_dim)
        try:
            return StreamConfig(height=cfg.height, width=cfg.width, frames_per_step=cfg.frames_per_step,
                                topk=cfg.topk, window=cfg.window, strategy=EvictionStrategy.parse(cfg.evict),
                                locality=mode, locality_extent=extent, model=model, projin=projin)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config(text: str, base: BenchConfig | None = None) -> BenchConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, strict=True, empty_lines_in_values=False)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            try:
                values[key] = SCHEMA[section][key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    return replace(base or BenchConfig(), **values)


def load_config(path) -> BenchConfig:
    return parse_config(Path(path).read_text())


def apply_overrides(cfg: BenchConfig, pairs) -> BenchConfig:
    """Apply ``section.key=value`` overrides with the same parse rules as the file."""
    lines: dict[str, list[str]] = {}
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {pair!r}")
        lhs, value = pair.split("=", 1)
        section, key = lhs.split(".", 1)
        lines.setdefault(section.strip(), []).append(f"{key.strip()} = {value.strip()}")
    text = "\n".join(f"[{s}]\n" + "\n".join(ls) for s, ls in lines.items())
    return parse_config(text, cfg)


def dump_config(cfg: BenchConfig) -> str:
    by_field = {key: section for section, keys in SCHEMA.items() for key in keys}
    out = {}
    for f in fields(cfg):
        section, key = by_field[f.name], f.name
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif v is None:
            v = "none"
        out.setdefault(section, []).append(f"{key} = {v}")
    return "\n".join(f"[{s}]\n" + "\n".join(ls) + "\n" for s, ls in out.items())
