from .camera import VIEW_NAMES, Camera, canonical_rig
from .mannequin import BodyModel, build_body_model, icosphere, mannequin_mesh
from .mesh import BODY, HAND, HEAD, TriMesh, densify_mesh, read_ply, vertex_normals, write_ply
from .points import KnnGraph, farthest_point_subsample, knn_indices, normal_frame, normal_frames

__all__ = [
    "VIEW_NAMES", "Camera", "canonical_rig",
    "BodyModel", "build_body_model", "icosphere", "mannequin_mesh",
    "BODY", "HAND", "HEAD", "TriMesh", "densify_mesh", "read_ply", "vertex_normals", "write_ply",
    "KnnGraph", "farthest_point_subsample", "knn_indices", "normal_frame", "normal_frames",
]
