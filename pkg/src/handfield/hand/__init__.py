"""Procedural articulated hand: skeleton, skinned mesh, cameras and rasterizer."""

from .camera import CameraModel, look_at, ring_cameras
from .kinematics import (
    FINGERS,
    N_JOINTS,
    PARENTS,
    Pose,
    Skeleton,
    forward_kinematics,
    forward_kinematics_matrices,
    mirror_map_point,
    mirror_map_pose,
    observation_to_canonical_joint_transforms,
    observation_to_canonical_matrices,
    skin_points,
    skin_vertices,
    skinning_matrices,
)
from .mesh import (
    FacetLocator,
    SkinnedHandMesh,
    brute_force_nearest_facet,
    generate_procedural_hand,
    query_blend_weights,
    scene_bounds,
)
from .raster import PosedMesh, RasterResult, project_bounds, rasterize
