"""Model zoos over a width x batch-size grid, annotated with loss-landscape metrics and phases."""

__version__ = "0.1.0"
