"""Latent variable models and ordination for multivariate percent cover data."""

from .errors import (CalibrationError, ConfigurationError, CoverLvmError,
                     CsvFormatError, DataValidationError, DomainError,
                     FitFailureError, ModelFormatError, ParameterError,
                     UnsupportedFamilyError)
from .families import (CellParams, DerivativeBundle, bernoulli_logpmf, beta_logpdf,
                       cumulative_logit_logpmf, hurdle_beta_logpdf, logistic, logit,
                       mean_response, ordered_beta_logpdf, presence_probability,
                       sample, shift_transform)
from .model import (CovariateMatrix, ModelSpec, ParameterLayout, ParameterSet,
                    ResponseMatrix, VariationalState, linear_predictor,
                    pack_parameters, unpack_parameters, validate)
from .estimator import (FitDiagnostics, FitOptions, FittedModel, VariationalObjective,
                        elbo, elbo_gradient, fit, fit_marginal_quadrature,
                        marginal_loglik_quadrature, predict_expected, predict_presence)
from .ordination import (DissimilarityMatrix, OrdinationScores, dissimilarity,
                         isotonic_regression, nmds, procrustes_error)
from .metrics import (MetricReport, auc, build_report, maep, prevalence_groups,
                      rmse, tjur_r2)
from .simulation import (SimDesign, SweepResult, calibrate_boundary_mass,
                         draw_true_model, run_sweep, simulate_dataset,
                         to_daubenmire, to_presence_absence)

__version__ = "0.1.0"
