"""Semantic-aware low-light image enhancement: network, losses, metrics and tooling."""
from .dataset import Batch, SamplePair, darken, iterate_batches, scan_paired_dir, scan_root, synthetic_pairs
from .imagecore import avg_gradient, load_image, retinex_decompose, save_image, spatial_gradients
from .losses import LossBreakdown, LossWeights, total_loss
from .net import SLLEN, NetConfig, Variant, build_network
from .ssn import SsnConfig, build_ssn, ssn_forward
from .trainer import TrainConfig, enhance_image, fit

__version__ = "0.1.0"
