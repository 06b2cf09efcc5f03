"""Correlation-weighted spectral-spatial loss for pan-sharpening.

Submodules: ``raster`` (windowed statistics), ``rasterfile`` (I/O),
``corrmap``, ``s3loss``, ``scalepipe`` (degradation, upsampling, synthetic
scenes), ``metrics``, ``toytrain`` and ``cli``. The package root stays free
of numeric imports so the CLI can set thread limits first.
"""

__version__ = "0.1.0"
