"""Variational knowledge distillation on a small numpy autograd engine."""

from .data import Dataset, GenSpec, generate, read_dataset, split, write_dataset
from .distributions import DiagonalGaussian, kl_divergence, log_prob, mc_kl_estimate, reparam_sample
from .inference import EvalReport, Prediction, auc, evaluate, export_latents, predict
from .model import ModelConfig, VkdModel, init_params
from .objectives import AnnealSchedule, LossBreakdown, beta_at, cvi_loss, multilabel_ce, vae_elbo, vkd_loss
from .tensor import Tensor, backward, finite_difference_check
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
