import random

import numpy as np
import torch


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns a torch generator for data shuffling."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def video_rng(seed: int, video_index: int, stream: int = 0) -> np.random.Generator:
    """Per-video random stream derived from seed XOR video index.

    Serial and parallel generation draw identical numbers; ``stream`` separates independent
    uses (behavior, features) of the same video.
    """
    return np.random.default_rng([seed ^ video_index, stream])
