"""Exception hierarchy shared by all fvsr modules."""


class FVSRError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FVSRError, ValueError):
    """Operand shapes do not agree."""


class DegenerateRowError(FVSRError, ValueError):
    """An attention row has no allowed key.

    Always indicates a mask-construction bug upstream, so it is never papered
    over with a uniform fallback.
    """

    def __init__(self, rows):
        self.rows = list(rows)
        preview = self.rows[:8]
        more = "" if len(self.rows) <= 8 else f" (+{len(self.rows) - 8} more)"
        super().__init__(f"rows with no allowed key: {preview}{more}")


class EmptyBlockError(FVSRError, ValueError):
    """A pooling block received no member tokens."""


class ConfigError(FVSRError, ValueError):
    """Invalid configuration value or combination."""


class CacheInvariantError(FVSRError, RuntimeError):
    """A KV cache's retained set violates its eviction strategy."""


class ScheduleError(FVSRError, ValueError):
    """A diffusion timestep lies outside the noise schedule."""


class FixtureFormatError(FVSRError, ValueError):
    """A binary tensor fixture is malformed."""
