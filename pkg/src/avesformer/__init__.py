"""Desk-scale numerics for audio-visual segmentation transformer mechanisms.

Submodules: ``tensor`` (float64 substrate and op counting), ``attention``,
``query_gen`` (prompt query generator), ``decoder`` (early-focus decoder),
``losses`` (losses and metrics), ``profiler`` and ``model``.
"""

__version__ = "0.1.0"
