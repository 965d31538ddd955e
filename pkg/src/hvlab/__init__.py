"""hvlab: coherent-state phase-space laboratory for fermionic mean-field dynamics.

Subpackage map:

* :mod:`hvlab.phasespace` — grids, windows, coherent states, hbar-Fourier.
* :mod:`hvlab.fermions` — antisymmetric N-body states and reduced densities.
* :mod:`hvlab.propagate` — Schrödinger propagation (Strang / Krylov).
* :mod:`hvlab.husimi` — k-particle Husimi and Wigner transforms.
* :mod:`hvlab.vlasov` — the limiting Vlasov equation and hierarchy checks.
* :mod:`hvlab.hierarchy` — remainder evaluators and weak-residual balances.
* :mod:`hvlab.transport` — Wasserstein-1 metrics and weak pairings.
* :mod:`hvlab.harness` / :mod:`hvlab.cli` — experiment configs and the CLI.
"""

__version__ = "0.1.0"

from .errors import (
    CapacityExceeded,
    ConfigInvalid,
    DegenerateSeries,
    GridMismatch,
    HvlabError,
    InsufficientSnapshots,
    NonOrthonormalOrbitals,
    OrderExceedsN,
    PartialFailure,
    ProblemTooLarge,
    UnresolvedWindow,
    WindowKindMismatch,
)
from .phasespace import (
    CoherentWindow,
    Grid,
    Potential,
    coherent_state,
    hbar_fourier,
    make_grid,
    make_potential,
    make_window,
    potential_from_samples,
    resolution_defect,
)
from .propagate import (
    EvolutionConfig,
    KineticBoundReport,
    Trajectory,
    evolve,
    hamiltonian_apply,
    kinetic_bound_check,
    save_trajectory,
    total_energy,
)
from .husimi import (
    HusimiMeasure,
    HusimiMoments,
    HusimiPropertyReport,
    PhaseGrid,
    WignerFunction,
    default_phase_grid,
    husimi_k,
    husimi_property_report,
    kinetic_identity_check,
    load_husimi,
    load_wigner,
    make_phase_grid,
    moments,
    save_husimi,
    save_wigner,
    wigner_1,
    wigner_position_marginal,
    wigner_smoothing_check,
)
from .vlasov import (
    PhaseTestFunction,
    VlasovState,
    evolve_vlasov,
    factorized_hierarchy_residual,
    load_vlasov,
    make_vlasov_state,
    phase_test_functions,
    save_vlasov,
    self_consistent_force,
    vlasov_energy,
    vlasov_from_husimi,
    vlasov_step,
)
from .hierarchy import (
    HierarchyFields,
    HierarchyTerms,
    PairRemainders,
    ScalingFit,
    hbar_scaling_fit,
    hierarchy_fields,
    mvt_residual,
    remainder_k2,
    remainder_r1,
    remainder_r1_pointwise,
    remainder_r1_tilde,
    weak_residual,
    write_scaling_csv,
)
from .fermions import (
    ManyBodyState,
    ReducedDensityMatrix,
    dense_state,
    kinetic_energy,
    load_state,
    localized_number,
    number_moment,
    occupation_state,
    orthonormalize_orbitals,
    overlap,
    plane_wave_orbitals,
    reduced_density,
    save_state,
    slater_determinant,
    to_dense,
    to_occupation,
)

__all__ = [
    "__version__",
    "CapacityExceeded", "ConfigInvalid", "DegenerateSeries", "GridMismatch",
    "HvlabError", "InsufficientSnapshots", "NonOrthonormalOrbitals",
    "OrderExceedsN", "PartialFailure", "ProblemTooLarge", "UnresolvedWindow",
    "WindowKindMismatch",
    "CoherentWindow", "Grid", "Potential", "coherent_state", "hbar_fourier",
    "make_grid", "make_potential", "make_window", "potential_from_samples",
    "resolution_defect",
    "ManyBodyState", "ReducedDensityMatrix", "dense_state", "kinetic_energy",
    "load_state", "localized_number", "number_moment", "occupation_state",
    "orthonormalize_orbitals", "overlap", "plane_wave_orbitals",
    "reduced_density", "save_state", "slater_determinant", "to_dense",
    "to_occupation",
    "EvolutionConfig", "KineticBoundReport", "Trajectory", "evolve",
    "hamiltonian_apply", "kinetic_bound_check", "save_trajectory",
    "total_energy",
    "HusimiMeasure", "HusimiMoments", "HusimiPropertyReport", "PhaseGrid",
    "WignerFunction", "default_phase_grid", "husimi_k",
    "husimi_property_report", "kinetic_identity_check", "load_husimi",
    "load_wigner", "make_phase_grid", "moments", "save_husimi", "save_wigner",
    "wigner_1", "wigner_position_marginal", "wigner_smoothing_check",
    "PhaseTestFunction", "VlasovState", "evolve_vlasov",
    "factorized_hierarchy_residual", "load_vlasov", "make_vlasov_state",
    "phase_test_functions", "save_vlasov", "self_consistent_force",
    "vlasov_energy", "vlasov_from_husimi", "vlasov_step",
    "HierarchyFields", "HierarchyTerms", "PairRemainders", "ScalingFit",
    "hbar_scaling_fit", "hierarchy_fields", "mvt_residual", "remainder_k2",
    "remainder_r1", "remainder_r1_pointwise", "remainder_r1_tilde",
    "weak_residual", "write_scaling_csv",
]
