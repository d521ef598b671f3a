"""Adversarially optimized mixup on a small numpy autodiff engine."""

from .adversary import AttackConfig, evaluate_robust, pgd_attack, random_search_attack
from .datasets import Dataset, gen_gaussian_blobs, gen_rings, gen_two_moons, load_idx
from .nn import ModelSpec, build_model, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, no_grad
from .training import Ablations, TrainConfig, train

__version__ = "0.1.0"
