"""Command line, config files, checkpoints, verification and benchmarks."""
