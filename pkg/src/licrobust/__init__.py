"""Rate-distortion attack and defense workbench for toy learned image codecs."""

__version__ = "0.1.0"
