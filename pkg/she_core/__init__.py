"""
she_core — микроскопическая численная часть лаборатории

Содержит:
- random_field: гауссов потенциал V и его ковариация R
- fk_engine: пути, функционалы 𝒱 и ℛ, наклонённая мера, калибровка λ
- markov_chain: регенерации, оценки диффузии, вероятности сближения
- grid_pde: решатель параболических задач на периодической решётке
"""

from .errors import (SheLabError, ValidationError, FieldWindowError,
                     StatisticalGuardError, NumericalError)
from .estimates import Estimate, LinearFit, linear_fit, loglog_fit, z_score, pairwise_z_scores
from .rng import RandomStreams, StageStreams
from .parallel import parallel_settings
from .random_field import (KernelSpec, CovarianceR, FieldRealization, FieldSpec,
                           make_kernels, covariance_R, sample_field, eval_V,
                           save_field, load_field, kernel_spec_id)
from .fk_engine import (PathSample, PathBatch, WeightedEnsemble, LambdaCalibration, PairMoment,
                        sample_path, sample_ensemble, script_V, script_R, tilt,
                        tilted_expectation, log_partition, calibrate_lambda,
                        psi_fk, psi_pair_moment)
from .markov_chain import (ChunkedChain, RegenerationRecord, HittingResult,
                           chunk_path, regenerations, pair_regenerations,
                           estimate_a_msd, estimate_a_regen, estimate_kappa,
                           pair_hitting_probability, hitting_table)
from .grid_pde import (Grid, GridFunction, GridTrajectory, HeatKernelGa,
                       step_she, solve_she, solve_psi_S, solve_phi_T, solve_omega,
                       solve_theta, solve_u1j, homogenized_u, wrap_guard, memory_estimate,
                       omega_fk)

__version__ = "1.0.0"

__all__ = [
    'SheLabError',
    'ValidationError',
    'FieldWindowError',
    'StatisticalGuardError',
    'NumericalError',
    'Estimate',
    'LinearFit',
    'linear_fit',
    'loglog_fit',
    'z_score',
    'pairwise_z_scores',
    'RandomStreams',
    'StageStreams',
    'parallel_settings',
    'KernelSpec',
    'CovarianceR',
    'FieldRealization',
    'FieldSpec',
    'make_kernels',
    'covariance_R',
    'sample_field',
    'eval_V',
    'save_field',
    'load_field',
    'kernel_spec_id',
    'PathSample',
    'PathBatch',
    'WeightedEnsemble',
    'LambdaCalibration',
    'PairMoment',
    'sample_path',
    'sample_ensemble',
    'script_V',
    'script_R',
    'tilt',
    'tilted_expectation',
    'log_partition',
    'calibrate_lambda',
    'psi_fk',
    'psi_pair_moment',
    'ChunkedChain',
    'RegenerationRecord',
    'HittingResult',
    'chunk_path',
    'regenerations',
    'pair_regenerations',
    'estimate_a_msd',
    'estimate_a_regen',
    'estimate_kappa',
    'pair_hitting_probability',
    'hitting_table',
    'Grid',
    'GridFunction',
    'GridTrajectory',
    'HeatKernelGa',
    'step_she',
    'solve_she',
    'solve_psi_S',
    'solve_phi_T',
    'solve_omega',
    'solve_theta',
    'solve_u1j',
    'homogenized_u',
    'wrap_guard',
    'memory_estimate',
    'omega_fk',
]
