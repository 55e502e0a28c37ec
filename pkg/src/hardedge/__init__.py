"""Hard-edge Feynman-Kac laboratory for a modified beta-Laguerre model."""

__version__ = "0.1.0"
