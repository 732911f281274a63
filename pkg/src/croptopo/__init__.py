"""Early- and in-season crop mapping by transferring the relative position of
crop clusters in 2D spectral feature spaces from historical years."""

__version__ = "0.1.0"
