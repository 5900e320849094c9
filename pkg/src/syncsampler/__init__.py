"""Projection-synchronized diffusion sampling over analytic denoisers."""

from .diffusion import SigmaPolicy, Schedule, make_schedule
from .denoisers import GaussianMixture, GMMDenoiser, PatchDenoiser
from .projections import EquirectProjector, IdentityProjector, MaskedProjector, RingProjector, View
from .samplers import SamplerConfig

__all__ = [
    "EquirectProjector",
    "GMMDenoiser",
    "GaussianMixture",
    "IdentityProjector",
    "MaskedProjector",
    "PatchDenoiser",
    "RingProjector",
    "SamplerConfig",
    "Schedule",
    "SigmaPolicy",
    "View",
    "make_schedule",
]
