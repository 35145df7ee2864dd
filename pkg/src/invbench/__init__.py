"""Desk-scale benchmark of generative and variational solvers for linear inverse problems.

Priors are isotropic Gaussian mixtures, so scores, denoisers and flow
velocities are exact and every solver can be checked against closed forms.
"""

from .linops import (Blur, Composition, Downsample, Identity, LinearOperator, Mask,
                     MatrixOperator, Radon, RadonGeometry, fbp, op_norm, radon_apply,
                     uniform_angles)
from .metrics import MetricReport, NoiseModel, data_consistency, estimate_diameter, psnr, ssim
from .priors import (DiffusionSchedule, EllipseSceneParams, FlowPrior, GmmPrior, fit_gmm_em,
                     generate_ellipse_image, make_schedule)

__version__ = "0.1.0"
