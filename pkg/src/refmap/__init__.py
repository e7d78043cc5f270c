"""Soft correlation maps for text-referred regions in large images.

Submodules: ``formats`` (tensor/annotation files), ``geometry`` (polygon
rasterization and masks), ``mcmg`` (annotation-to-map compilation),
``fusion`` and ``hmsa`` (embedding-to-map inference), ``metrics`` (scoring
and annotation protocol checks), ``cli``.
"""

__version__ = "0.1.0"
