"""Turn fuzzer vulnerability reports into reproducible, pinned rebuilds."""

__version__ = "0.1.0"
