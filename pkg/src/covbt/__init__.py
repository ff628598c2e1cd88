"""Covariate-adjusted Bradley-Terry inference with one-step estimators."""
from .core import (ComparisonDataset, ComparisonRecord, DataError, EifSample,
                   EstimateReport, IdentificationError, NumericalError, PairwiseScheme,
                   free_from_winvec, index_to_pair, pair_to_index, winvec_from_free)
from .estimators import (cond_bt_eif_phi, cond_bt_if_phi, cond_bt_psi, known_ratio_phi,
                         one_step_phi, one_step_phi_fusion, one_step_psi,
                         one_step_psi_fusion, tau, wald_ci)
from .graph import build_gamma, build_gamma_full, is_identifiable
from .nuisance import LearnerSpec, NuisanceBundle, estimate_nuisances
from .projection import SolverOptions, eval_U, lambda_matrix, solve_projection

__version__ = "0.1.0"
