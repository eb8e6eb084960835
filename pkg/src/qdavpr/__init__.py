"""
Query-based domain-agnostic visual place recognition for python.

Author: QdaVPR developers
"""

__version__ = "0.1.0"
__author__ = "QdaVPR developers"

from qdavpr.adversarial import AdversarialHeads, grl
from qdavpr.config import ExperimentConfig, ModelConfig, load_config, save_config
from qdavpr.core import QdaVPRModel
from qdavpr.train import Trainer, dump_attention, evaluate, lr_at, run_sweep
