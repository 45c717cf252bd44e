"""Shared exception hierarchy."""


class StorydeskError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StorydeskError):
    """Invalid configuration value or unparseable config file."""
