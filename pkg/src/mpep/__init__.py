"""Most probable escape paths of planar SDEs through an unstable limit cycle."""
__version__ = "0.1.0"
