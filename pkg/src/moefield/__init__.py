"""Sparse mixture of dense-grid radiance-field experts, in numpy."""
from .autodiff import Tensor, backward, no_grad
from .ensemble import PairedPredictions, ensemble_error, error_gap, improvement_margin, optimal_alpha
from .experts import Expert, ExpertBank, bank_resolutions, build_bank
from .gate import Gate, gate_for
from .grid import VoxelGrid
from .losses import aux_loss, penalty_weights, photometric_loss, rw_aux_loss, total_loss
from .metrics import EvalReport, active_params, evaluate, psnr, ssim
from .moe import DensityFilter, MixtureOfExperts, ensemble_moe
from .render import Camera, composite, render_image, render_rays
from .scene import Dataset, get_scene, make_dataset
from .trainer import TrainConfig, build_moe, pretrain_experts, run_pipeline

__version__ = "0.1.0"
