"""Semi-supervised video action recognition with a temporal-gradient teacher."""

__version__ = "0.1.0"
