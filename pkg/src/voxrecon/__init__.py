"""Two-pathway voxel-to-image reconstruction on a synthetic stimulus world."""

__version__ = "0.1.0"
