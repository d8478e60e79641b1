"""panelfe: two-way fixed-effects panel models with bias corrections.

Estimates semiparametric panel models with unit and time effects (linear,
probit, logit, Poisson), quantifies the incidental-parameter bias, applies
analytical and jackknife corrections to coefficients and average partial
effects, and ships a seeded Monte Carlo lab for bias/coverage experiments.
"""

__version__ = "0.1.0"

from .bias import (BiasEstimates, CorrectedEstimate, abc, estimate_B,
                   estimate_D, estimate_bias, hbc, hbc_combine, jbc,
                   jbc_combine, probit_closed_form_bias, psbc, sbc,
                   sbc_combine)
from .data import (PanelData, PanelIndex, SplitScheme, ValidationReport,
                   build_index, clean, derive_lags, drop_groups,
                   leave_period_out, leave_unit_out, load_csv, make_panel,
                   period_halves, save_csv, subpanel, unit_halves, validate)
from .effects import APEResult, ape, corrected_ape, effect_matrix
from .errors import (ConvergenceError, DisconnectedPanelError, InputError,
                     PanelFEError, SeparationError, SingularHessianError,
                     ValidationError)
from .estimator import (FitResult, PanelFixedEffects, SolveOptions,
                        evaluate_at, fit, profile, vcov_beta)
from .families import (EffectSpec, Family, LinearFamily, LogitFamily,
                       PoissonFamily, ProbitFamily, expected_weight,
                       get_family, index_derivs, simulate_outcome)
from .projection import TwoWayProjector, two_way_project
from .simlab import (McDesign, SimReport, calibrated_logit_design,
                     coverage_theory, normal_variance_mc,
                     normal_variance_oracle, normal_variance_suite, run_mc)
