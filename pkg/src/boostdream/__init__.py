"""boostdream: refine coarse 3D assets into voxel radiance fields.

A coarse triangle mesh is distilled into a dense voxel field, then
optimized with multi-view score-distillation guidance over 2x2 composite
renders conditioned on normal maps. Guidance comes from a local analytic
oracle or a remote diffusion sidecar.
"""

__version__ = "0.1.0"
