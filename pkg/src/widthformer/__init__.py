"""Width-compressed BEV view transformation with reference positional encodings."""

from .decoder import BevGrid, DecoderParams, make_grid, transform, transform_full_oracle
from .encoding import (
    EncodingSet, FourierEncoder, bev_query_pe, fourier, pixel_refpe, query_refpe, reference_pe, width_refpe,
)
from .geometry import (
    CameraModel, CameraRig, DepthBins, PerturbSpec, PolarCoord, lift_pixel, perturb_rig, project_to_ego, to_polar,
)
from .model import ModelConfig, WidthFormer, removability_check
from .numeric import grad_check, layer_norm, make_rng, matmul, mha, mlp_forward, softmax
from .scene import SceneSpec, gen_scene
from .width import RefineParams, height_maxpool, refine, refine_cost

__version__ = "0.1.0"
