"""Audio-driven portrait radiance fields on decomposed feature grids.

Desk-scale, CPU-only: a numpy autodiff tape, multiresolution hash grid
encoders, an audio conditioning pipeline, head and torso fields, occupancy
pruned volume rendering, and the three-stage training recipe.
"""

__version__ = "0.1.0"
