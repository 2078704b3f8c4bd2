"""arbor: multi-view tree reconstruction toolkit.

Turns camera poses, point clouds, branch annotations, and segmentation masks
into simulatable 3D tree geometry: flow-field-assisted annotation, multi-view
triangulation, generalized-cylinder skeletons, skinned/displaced/textured
meshes, and an articulated rigid-body export.
"""

__version__ = "0.1.0"
