"""Matrix-free high-order multigrid for the Poisson problem with a vertex-patch
smoother whose local problems are solved by p-multigrid."""

from .mesh import build_hierarchy, distort, distort_hierarchy, enumerate_dofs, enumerate_patches
from .tensorfem import make_basis, cell_apply_laplace, classify_geometry
from .globalop import make_operator, global_vmult, assemble_oracle, make_rhs
from .plocal import build_psequence, local_solve, p_v_cycle
from .gmg import Multigrid, MgConfig, SmootherConfig, dsatur_color, gmres_solve, solve_poisson

__version__ = "0.1.0"
