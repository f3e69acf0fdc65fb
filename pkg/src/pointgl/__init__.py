"""Global point embedding plus local graph pooling for point clouds, in numpy."""

__version__ = "0.1.0"
