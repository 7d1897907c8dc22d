class ConfigError(Exception):
    """Invalid configuration detected at startup (bad bounds, missing names, ...)."""


class WorkspaceError(Exception):
    """Fatal shared-workspace problem (missing root, version mismatch, unwritable)."""
