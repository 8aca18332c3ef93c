"""Physics-informed EEG classification with coupled FitzHugh-Nagumo constraints."""

__version__ = "0.1.0"
