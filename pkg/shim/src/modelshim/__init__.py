"""HTTP shim hosting models behind the four-endpoint wire protocol."""

__version__ = "0.1.0"
