"""Differentiable 2D Gaussian splatting with deferred PBR shading,
ray-traced indirect illumination, and multi-view material regularization."""

from .config import SceneConfig, load_config, save_config
from .losses import depth_normal_loss, eval_metrics, normal_prior_loss, photometric_loss, psnr, ssim
from .multiview import (ReflectionPriorMap, ScorePointCloud, derive_gate_and_target,
                        fuse_scores, homography, luminance_normalize, material_mv_loss,
                        reflection_loss, reflection_score, warp_patch)
from .rasterize import (GBuffer, ProjectedSplat, composite_over_background,
                        project_gaussian, render_normal_from_depth, splat_backward,
                        splat_forward)
from .raytrace import (DiskBVH, RayHitList, brute_force_intersect, build_bvh,
                       intersect_ray, trace_image, trace_indirect, trace_rays_batch)
from .scene import Camera, GaussianSet, ImageBuffer, init_gaussians
from .shading import (DFGLut, EnvironmentCubemap, brdf_fs, deferred_shade, fresnel_F,
                      fresnel_f0, ggx_D, mc_reference_specular, precompute_dfg, smith_G)
from .toys import TOY_NAMES, make_toy_scene, perturb_for_training, write_toy_scene_dir
from .trainer import (AdamOptimizer, LossWeights, Schedule, TrainResult, TrainScene,
                      TrainingDiverged, build_reflection_priors, compute_total_loss,
                      gradcheck_suite, optimizer_step, train)

__version__ = "0.1.0"
