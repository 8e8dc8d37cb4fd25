"""Slow-fast mean-field diffusions: simulation, averaging and large deviations."""
from .action import (DiscretePath, Terminal, controlled_averaged_path, evaluate_action,
                     feedback_control, minimize_action, relaxed_cost, solve_averaged_ode)
from .errors import *  # noqa: F401,F403
from .invariant import (InvariantBank, averaged_coefficients, averaged_drift, ergodicity_rate,
                        estimate_invariant, q_matrix)
from .ldp import (LadderTable, TailEvent, crude_tail, gaussian_tail, is_tail, ldp_gap,
                  linear_endpoint_law, variance_reduction)
from .measures import EmpiricalMeasure, ks_uniform, sliced_w2, w2, w2_1d
from .model import (MeasureFeatures, ModelSpec, ScalePoint, build_model, builtin_linear_model,
                    default_dt, fast_modulated_noise_model, probe_assumptions, register_model,
                    scale_ladder)
from .occupation import (OccupationMeasure, build_occupation, check_viability,
                         product_occupation)
from .simulate import Control, ParticleEnsemble, simulate_frozen_fast, simulate_paths, step_system

__version__ = "0.1.0"
