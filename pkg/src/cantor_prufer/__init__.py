"""Self-consistent Prufer synthesis of potentials with embedded eigenvalues that split."""

__version__ = "0.1.0"
