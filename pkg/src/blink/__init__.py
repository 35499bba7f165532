"""World-model toolkit for cumulative NK-cell cytotoxic outcome estimation."""

__version__ = "0.1.0"
