"""Adaptive-mesh dam-break wave simulator on longitude-latitude rasters."""
from .cpgraph import MeshGraph, read_mesh, rivara_refine, validate_conformity, write_mesh
from .femcore import PhysicsConstants, WaveSystem, build_dof_map
from .kernels import available_backends, set_num_threads, use_backend
from .simulation import Scenario, load_scenario, run_scenario
from .terrain import RefinementConfig, generate_mesh, load_raster
from .timestepper import Convention, derive_params, run_transient

__version__ = "0.1.0"
