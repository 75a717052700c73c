"""Power-of-d dispatching to heterogeneous servers.

Mean-field analysis and optimization of querying and idleness-aware
assignment rules, plus a finite-k simulator and an experiment harness.
"""

from .assignment import CidAssignment, fastest_idle, index_for
from .core import SystemParams, enumerate_mixes, gamma, normalized_params, problem_size
from .meanfield import (Exponential, GeneralFCFS, InstabilityDetected, NonConvergence,
                        analyze, mean_response_time, solve_fixed_point)
from .optimizer import (Budget, Infeasible, OptimizationProblem, optimize,
                        optimize_fixed_rule, optimize_gen_seeded, optimize_src_jsq)
from .querying import Br, Det, Gen, Iid, Ind, Sfc, Src, Uni, lower, stability_region

__version__ = "0.1.0"
