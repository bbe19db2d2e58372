"""Deep and Markovian solvers for forward-backward SDEs with jumps."""
import logging

__version__ = "1.0.0"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level="INFO"):
    """Root logging for command-line runs; library modules only create loggers."""
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT)
