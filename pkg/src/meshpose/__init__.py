"""meshpose: category-level 3D pose estimation with neural mesh models.

Pipeline stages: synthetic posed-view generation, per-instance contrastive
feature-bank training on a shared geodesic polyhedron, canonicalization and
merging of instance banks into one category-level neural mesh, and
render-and-compare pose inference with rotation-error metrics.
"""

__version__ = "0.1.0"
