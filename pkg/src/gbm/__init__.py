"""Group Behaviour Model: a hidden Markov model over groups of individuals.

A latent cage-level regime drives independent categorical emissions for each
of K channels (individuals). Channel identities are arbitrary per group, so
each group carries a permutation aligning its channels to the model's
canonical order; parameters are shared across groups and fitted by MAP EM.
"""
from .core import (MISSING, Dataset, Dims, GBMError, Group, IngestError, ModelParams,
                   NonConvergent, Permutation, PosteriorStats, Priors, Run,
                   apply_permutation, expected_dwell, make_observation, steady_state,
                   validate_params)
from .em import FitConfig, FitResult, fit_global, fit_single_group, m_step
from .evaluation import (align_states, anomaly_scores, fit_baseline, loo_cv,
                         normalised_ll, rdl, select_num_states)
from .inference import (DegenerateStep, brute_force_posteriors, dataset_log_likelihood,
                        forward_backward, map_permutation, posterior_over_q)
from .kernels import BACKEND
from .synth import SynthSpec, sample_dataset, scramble_identities

__version__ = "0.1.0"
