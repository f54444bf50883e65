"""Hyperbolic-cross reduced-order models for fluorescence optical tomography."""
from .mesh import Mesh, disk_mesh, load_mesh, refine, unit_disk_mesh
from .fem import EMISSION, EXCITATION, OpticalParameters, assemble_system
from .forward import TruthOperator, apply_T, apply_Tt, build_truth_operator
from .reduce import ReducedModel, build_reduced_model, certify, load_model, save_model

__version__ = "0.1.0"
