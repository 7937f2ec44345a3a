"""Magnetic polarizability tensor toolkit.

Computes MPTs of multiple / inhomogeneous conducting permeable objects with
lowest-order edge elements, evaluates the asymptotic perturbed-field formula,
and runs MUSIC localisation and dictionary classification on synthetic
multistatic data.
"""

__version__ = "0.1.0"

from .core import (MU0, ComplexTensor2, DimensionlessParams, Material,
                   ObjectInstance, Scene, SceneReport, compute_nu,
                   validate_scene)
from .mesh import (TetMesh, MeshQuality, ball_mesh, generate_box_scene,
                   load_mesh, mesh_quality, region_volume, save_mesh)
from .fem import (AssembledSystem, EdgeSolution, TransmissionProblem,
                  assemble, diagnostics_json, evaluate_curl, solve,
                  solve_theta_zero)
from .mpt import (CanonicalObject, FeatureCounts, MptRecord,
                  SpectralSignature, canonicalize, compute_mpt, compute_n0,
                  count_spectral_features, mpt_sphere_analytic,
                  sphere_eigenvalue, sweep_spectra, transform_mpt,
                  transmission_problem)
from .forward import DipoleSource, FieldProbe, d2g, dipole_h0, perturbed_field, uniform_h0
from .inverse import (CoilArray, Dictionary, MsrMatrix, add_noise, build_msr,
                      dictionary_build, dictionary_match,
                      estimate_object_count, music_image, recover_mpts)
