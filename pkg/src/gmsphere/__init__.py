"""Positivity-preserving finite elements for the shadow Gierer-Meinhardt system on the unit sphere."""

from .fem import Operators, build_operators
from .mesh import SurfaceMesh, build_cubed_sphere, refine, surface_area
from .reaction import ModelParams
from .sim import CaseResult, RunConfig, convergence_study, load_config, make_initial_u, preset_configs, run_case
from .stepping import SchemeConfig, State, step

__all__ = [
    "CaseResult", "ModelParams", "Operators", "RunConfig", "SchemeConfig", "State", "SurfaceMesh",
    "build_cubed_sphere", "build_operators", "convergence_study", "load_config", "make_initial_u",
    "preset_configs", "refine", "run_case", "step", "surface_area",
]
