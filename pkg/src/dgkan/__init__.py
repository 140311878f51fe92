"""Domain-group KAN detector heads with drift-compensated data-free replay,
plus the synthetic domain-incremental benchmark harness and experiment CLI.
"""

__version__ = "0.1.0"

from . import cli, continual, fskdcp, kanheads, losses, numcore, synthbench

__all__ = ["cli", "continual", "fskdcp", "kanheads", "losses", "numcore", "synthbench",
           "__version__"]
