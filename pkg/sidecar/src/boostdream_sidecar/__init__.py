"""Guidance sidecar for boostdream: mock oracle or SD 1.5 + ControlNet."""

__version__ = "0.1.0"
