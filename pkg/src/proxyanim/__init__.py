"""proxyanim: 3D-aware animation of single images via proxy-embedded neural textures.

The pipeline: align a coarse generated 3D shape to the pixel-aligned depth of
the reference image, attach optimizable texture features to sparse proxy
vertices, fit them with a differentiable software rasterizer, then animate the
proxy geometry (position-based dynamics or skeletal skinning) and composite
each rendered frame over a propagated background.
"""

from .geometry import (
    EPS_NEAR,
    PinholeCamera,
    PointCloud,
    ProxyMesh,
    SimilarityTransform,
    apply_transform,
    camera_from_spherical,
    decimate_mesh,
    laplacian_smooth,
    look_at_transform,
)

__version__ = "0.1.0"
