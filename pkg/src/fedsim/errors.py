"""Error taxonomy shared across the simulator.

Three failure classes map onto the CLI exit codes: configuration errors
(bad config files, bad shapes, unparseable inputs) exit with 2, invariant
violations (internal contract breaches that should abort a run) exit with 3.
Domain errors cover operations invoked on values outside their domain, such
as an empty dataset; the CLI treats them like configuration errors.
"""

from __future__ import annotations


class FedsimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(FedsimError):
    """Invalid configuration: unknown keys, bad types, inconsistent sizes."""


class DomainError(FedsimError):
    """Operation invoked outside its domain (empty dataset, bad counts)."""


class IdxParseError(ConfigError):
    """Malformed IDX file. Messages name the byte offset of the problem."""

    def __init__(self, path: str, offset: int, message: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: byte offset {offset}: {message}")


class InvariantError(FedsimError):
    """An internal invariant was violated; the run must abort."""
