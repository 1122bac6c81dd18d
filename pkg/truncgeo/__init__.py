import logging

log = logging.getLogger(__name__)

__version__ = "0.1.0"
__author__ = "truncgeo developers"

# submodules import __version__, so they come after it
from truncgeo.models import ModelSpec, ParamPoint, Sample, draw_sample, get_model  # noqa: E402
from truncgeo.priors import builtin_prior, custom_prior, matching_residual  # noqa: E402
from truncgeo.inference import fit_mle, posterior_grid  # noqa: E402

__all__ = [
    "ModelSpec",
    "ParamPoint",
    "Sample",
    "builtin_prior",
    "custom_prior",
    "draw_sample",
    "fit_mle",
    "get_model",
    "matching_residual",
    "posterior_grid",
]
