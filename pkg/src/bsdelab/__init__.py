"""Numerical laboratory for stochastic recursive optimal control.

Forward SDE simulation, regression-based BSDE solvers with the backward
semigroup, empirical driver-representation probes, a monotone explicit HJB
finite-difference solver, dynamic-programming value estimation, and
viscosity-inequality checks, wired together by a benchmark registry and a
reporting harness.
"""

__version__ = "0.1.0"

from .errors import ConfigError, LabError, NonFiniteError, StabilityError
from .problems import (ControlProblem, ControlProcess, ControlSet, GeneratorSpec,
                       RandomSource, SmoothTestFunction, TimeGrid, make_grid,
                       validate_problem)
from .regression import RegressionBasis
from .simulate import PathEnsemble, load_ensemble, resimulate_with_offset, save_ensemble, simulate
from .bsde import (BsdeSolution, backward_semigroup, comparison_check,
                   picard_iteration_bound, semigroup_consistency_residual, solve_bsde)
from .representation import (RateFit, RepresentationProbe, conditional_expectation_residual,
                             default_grid_steps, probe_generator, verify_limit)
from .hjb import (HjbOperator, SpaceGrid, ValueGrid, apply_Lv, cfl_bound, cfl_time_grid,
                  hjb_residual, hjb_step, interpolate_space, load_value_grid,
                  save_value_grid, solve_hjb, write_value_grid_csv)
from .valuation import DppConfig, check_dpp, deterministic_check, estimate_value
from .viscosity import (ExtremumCertificate, PerturbedGenerator, build_F, check_subsolution,
                        check_supersolution, find_extrema)
from .benchmarks import (BenchmarkCase, REGISTRY, build_problem_from_config, get_benchmark,
                         list_benchmarks, registry_self_test)
from .harness import cross_validate, run, validate_config, write_report
