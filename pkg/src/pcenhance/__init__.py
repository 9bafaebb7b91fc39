"""Point cloud attribute quality enhancement with a graph-attention generator and a WGAN-GP critic."""

from .critic import Critic, CriticConfig
from .distortion import QP_LADDER, DistortionProfile, bitrate_proxy, distort
from .generator import Generator, GeneratorConfig
from .metrics import BDResult, RDCurve, bd_metrics, delta_psnr, psnr, ycbcr_psnr
from .objectives import LossConfig, discriminator_loss, generator_loss, gradient_penalty, rmse_loss
from .patches import fuse_patches, generate_patches, group_patches
from .pointcloud_io import ColorSpace, PointCloud, load_ply, rgb_to_ycbcr, save_ply, ycbcr_to_rgb
from .trainer import TrainConfig, build_dataset, enhance_cloud, train

__version__ = "0.1.0"

__all__ = [
    "BDResult", "ColorSpace", "Critic", "CriticConfig", "DistortionProfile", "Generator",
    "GeneratorConfig", "LossConfig", "PointCloud", "QP_LADDER", "RDCurve", "TrainConfig",
    "bd_metrics", "bitrate_proxy", "build_dataset", "delta_psnr", "discriminator_loss", "distort",
    "enhance_cloud", "fuse_patches", "generate_patches", "generator_loss", "gradient_penalty",
    "group_patches", "load_ply", "psnr", "rgb_to_ycbcr", "rmse_loss", "save_ply", "train",
    "ycbcr_psnr", "ycbcr_to_rgb",
]
