"""Weight-sharing architecture search over ShuffleNet-style split/shuffle cells."""

__version__ = "0.1.0"
