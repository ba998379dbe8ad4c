"""Dynamic channel splitting for efficient real-world super-resolution, at desk scale."""
from .cost import CostReport, model_cost, solve_uniform_a
from .degrade import DegradationRecipe, StageParams, apply_recipe, decode_vector, encode_vector, sample_recipe
from .harness import RunLog, TrainConfig, evaluate, train
from .losses import LossWeights, composite_loss, knn_patches, l_nonlocal, l_pix, l_reg, l_sparsity
from .metrics import psnr_y, ssim_y
from .model import ModelConfig, SplitSR, load_checkpoint, preset, save_checkpoint
from .numerics import Adam, Tensor

__version__ = "0.1.0"
