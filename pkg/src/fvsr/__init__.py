"""Desk-scale reference implementation of a streaming one-step video super-resolution stack.

Modules: ``tensor_core`` (dense oracle), ``rope3d``, ``masks``,
``sparse_attn`` (block-sparse attention), ``kv_stream`` (streaming engine),
``lr_projin``, ``losses``, ``tc_decoder`` and the ``cli`` harness.
"""

__version__ = "0.1.0"

from .errors import (
                     CacheInvariantError,
                     ConfigError,
                     DegenerateRowError,
                     DimensionError,
                     EmptyBlockError,
                     FixtureFormatError,
                     FVSRError,
                     ScheduleError,
)

__all__ = [
                     "CacheInvariantError",
                     "ConfigError",
                     "DegenerateRowError",
                     "DimensionError",
                     "EmptyBlockError",
                     "FVSRError",
                     "FixtureFormatError",
                     "ScheduleError",
                     "__version__",
]
