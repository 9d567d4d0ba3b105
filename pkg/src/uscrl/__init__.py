"""Supervised contrastive representation learning over a fixed labeled pool.

Tuple sampling regimes, U/V-statistic risk estimators with their
Monte Carlo variants, generalization-bound calculators with explicit
constants, norm-constrained models trained by projected SGD, and the
experiment protocols tying them together.
"""

__version__ = "0.1.0"

from .dataset import (ClassStats, GaussianSpec, LabeledDataset, LabeledSample,
                      class_stats, generate_gaussian, load_idx)
from .errors import (ConfigError, FormatError, NumericError,
                     PreconditionError, SizeError, UscrlError)
from .loss import LossSpec, default_clip, loss_grad, loss_value, score_vector
from .model import (LinearModel, LinearProbe, MlpModel, fit_probe,
                    load_checkpoint, make_linear, make_mlp, project,
                    save_checkpoint, spectral_norm)
from .risk import (Exact, MonteCarlo, RiskEstimate, decoupled_block_estimate,
                   population_risk_mc, subsampled_risk, ustat_conditional,
                   ustat_overall, vstat_overall)
from .bounds import (BoundInputs, BoundReport, basic_bound, chernoff_lambda,
                     dudley_bound, effective_n, empirical_rademacher_probe,
                     evaluate_theorem, linear_class_K, nn_class_K,
                     subsampled_bound)
from .trainer import (TrainConfig, TrainReport, compare_regimes,
                      sample_complexity_search, train)
from .tuples import (Tuple, TupleSet, count_all_tuples, disjoint_tuples,
                     enumerate_all_tuples, greedy_iid_tuples,
                     subsample_tuples, tuple_mass)
