from .bayes import SamplerConfig, effective_sample_size, fit_bayes
from .identification import plugin_effect
from .ipw import fit_ipw
from .mle import fit_mle
from .results import FreqFit, PosteriorFit, fit_from_json_dict, read_draws_csv

__all__ = [
    "FreqFit",
    "PosteriorFit",
    "SamplerConfig",
    "effective_sample_size",
    "fit_bayes",
    "fit_from_json_dict",
    "fit_ipw",
    "fit_mle",
    "plugin_effect",
    "read_draws_csv",
]
