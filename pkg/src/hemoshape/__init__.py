"""Shape optimization of shear-thinning flow in moving domains."""

__version__ = "0.1.0"
