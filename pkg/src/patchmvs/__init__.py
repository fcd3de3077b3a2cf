"""Multi-view stereo depth and normal estimation with checkerboard PatchMatch."""

__version__ = "0.1.0"
