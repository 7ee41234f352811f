"""
homogenization — макроскопические параметры и корректор

Содержит:
- homogenize: постоянная c, оценки эффективной диффузии, c̄, стационарная ковариация
- noise_strength: эффективная сила шума ν² двумя путями
- corrector: мезоскопический корректор u₁^ε, строгая и слабая ошибка
- profiles: начальные данные u₀, тестовые функции g и однородное решение ū
"""

from .profiles import (Profile, GaussianProfile, ConstantProfile, AffineProfile, Homogenized,
                       gaussian_test_function, make_profile)
from .homogenize import (CbarReport, StationaryCovariance, DecayReport, DiffusivityReport,
                         constant_c, constant_c_quadrature, estimate_a_ST, estimate_a_corrector_form,
                         estimate_cbar, pair_covariance, stationary_covariance, stationary_covariance_grid,
                         psi_decay, diffusivity_report)
from .noise_strength import (NoiseReport, riesz_integral, riesz_integral_mc, ew_variance_integral,
                             estimate_nu2)
from .corrector import (MesoSchedule, ErrorReport, meso_schedule, assemble_I, u1_eps_fk,
                        u1_eps_pde, strong_error, weak_error)

__version__ = "1.0.0"

__all__ = [
    'Profile',
    'GaussianProfile',
    'ConstantProfile',
    'AffineProfile',
    'Homogenized',
    'gaussian_test_function',
    'make_profile',
    'CbarReport',
    'StationaryCovariance',
    'DecayReport',
    'DiffusivityReport',
    'constant_c',
    'constant_c_quadrature',
    'estimate_a_ST',
    'estimate_a_corrector_form',
    'estimate_cbar',
    'pair_covariance',
    'stationary_covariance',
    'stationary_covariance_grid',
    'psi_decay',
    'diffusivity_report',
    'NoiseReport',
    'riesz_integral',
    'riesz_integral_mc',
    'ew_variance_integral',
    'estimate_nu2',
    'MesoSchedule',
    'ErrorReport',
    'meso_schedule',
    'assemble_I',
    'u1_eps_fk',
    'u1_eps_pde',
    'strong_error',
    'weak_error',
]
