from covplan.mip.export import from_lp, to_lp, write_lp
from covplan.mip.model import INF, MipModel, ModelError, check_psd
from covplan.mip.solver import (GAP_LIMIT, INFEASIBLE, NODE_LIMIT, OPTIMAL, TIME_LIMIT,
                                Solution, SolverConfig, solve)

__all__ = ["INF", "MipModel", "ModelError", "check_psd", "Solution", "SolverConfig", "solve",
           "OPTIMAL", "INFEASIBLE", "GAP_LIMIT", "TIME_LIMIT", "NODE_LIMIT", "to_lp", "from_lp", "write_lp"]
