"""Reference trainer service: optimizes toy-scale adapters behind the
training wire protocol and serves generation with named adapters."""

__version__ = "0.1.0"
