"""Monte Carlo CT organ dosimetry and scout-based organ dose prediction."""

__version__ = "0.1.0"
