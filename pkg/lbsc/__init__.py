"""Learning-based safety-stability-driven control (LBSC) for a five-car CCC platoon."""

__version__ = "0.1.0"
