"""Language-guided navigation in synthetic graph worlds with state-routed
mixture-of-experts policies."""

__version__ = "0.1.0"
