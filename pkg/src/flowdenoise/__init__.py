"""Point cloud denoising by straight, constant-velocity flows."""
from .flow import FilterConfig, FlowModel, VelocityStack, filter_cloud, filter_patch, straightness
from .geometry import Patch, bounding_sphere, extract_patch, farthest_point_sample, knn_indices
from .metrics import NoiseSpec, SurfaceSpec, chamfer, gen_noise, point_to_surface

__version__ = "0.1.0"
