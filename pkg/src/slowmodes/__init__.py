"""Learn leading generator eigenpairs of Langevin dynamics from biased runs."""

__version__ = "0.1.0"
