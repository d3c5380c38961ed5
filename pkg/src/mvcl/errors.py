"""Shared error types that do not belong to a single subsystem."""


class ConfigError(Exception):
    """A configuration value or shape violates a documented constraint."""
