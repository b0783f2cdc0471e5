"""
Process-wide seeding for reproducible runs
"""
import random
import logging

import numpy as np
import torch

logger = logging.getLogger(__name__)


def seed_everything(seed):
    """Seed python, numpy and torch and switch torch to deterministic kernels"""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.backends.cudnn.benchmark = False
    logger.debug(f"Seeded all generators with {seed}")


def torch_generator(seed):
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
