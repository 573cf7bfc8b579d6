"""Perturbation augmentation: Gaussian noise masked by dropout.

Produces the perturbation-augmented node embedding (the "easy" positive view)
from an anchor embedding. The default path adds a Bernoulli-masked scaled
Gaussian to the anchor; the alternative ``eq4_mode`` applies inverted dropout
to the already-noised embedding instead. Both keep the anchor as the mean.
"""

from __future__ import annotations

import dataclasses

import torch


@dataclasses.dataclass(frozen=True)
class AugmentConfig:
    eta: float = 1.0  # noise scale
    sigma: float = 0.01  # Gaussian std
    dropout_p: float = 0.5  # drop probability of the mask
    eq4_mode: bool = False  # mask the sum instead of the perturbation
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")


def perturb_augment(
    anchor: torch.Tensor, config: AugmentConfig, rng: torch.Generator
) -> torch.Tensor:
    """Sample one augmented view of the anchor.

    Noise and mask are drawn from ``rng`` only, so the perturbation delta is
    independent of the anchor's values and identical seeds reproduce the
    exact same view.
    """
    noise = torch.empty_like(anchor)
    noise.normal_(0.0, 1.0, generator=rng)
    noise = config.sigma * noise
    keep = torch.empty_like(anchor)
    keep.bernoulli_(1.0 - config.dropout_p, generator=rng)
    if config.eq4_mode:
        # inverted dropout over the noised embedding keeps E[X] = anchor
        return keep * (anchor + config.eta * noise) / (1.0 - config.dropout_p)
    return anchor + keep * (config.eta * noise)
