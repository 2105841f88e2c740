"""Hierarchical prototype memory and a three-stage restoration network on a small autodiff engine."""

from .arraydiff import Tensor, backward, grad_check
from .memory import MemoryConfig, PrototypeBank, address, hierarchical_read, init_bank, read, summarize
from .network import NetConfig, StageNetwork
from .objective import LossConfig, charbonnier, contrastive_loss, edge_loss, recon_loss, total_loss

__version__ = "0.1.0"
