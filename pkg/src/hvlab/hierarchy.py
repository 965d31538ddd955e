"""Transport balance of phase-space measures along the many-body flow.

The time derivative of the k-particle phase-space measure splits into free
transport, a mean-field interaction term contracted from the (k+1)-particle
measure, and remainder fields that are small in the semiclassical regime.
Every remainder is a coherent-state bilinear against a modified correlation
kernel:

* the position remainder pairs the kernel with the center derivative of the
  window on one ket leg,
* the momentum remainder subtracts the mean-field contraction from a
  smeared interaction bilinear whose weight averages the force along the
  segment between the bra and ket window legs (Gauss-Legendre in the
  segment parameter),
* the pair-potential remainder weighs the two-particle kernel with the
  potential difference across the window legs directly.

On the periodic grid the window is an image sum, and a momentum derivative
of any bilinear brings down the displacement on the covering line, not its
principal representative.  Sampled field values are unaffected (at lattice
momenta every image carries unit phase), so ``hierarchy_fields`` evaluates
the momentum-derivative terms of the balance analytically, with the image
offsets resolved, rather than differentiating sampled fields spectrally;
position derivatives act on smooth periodic fields and stay spectral.  The
smeared field itself carries one force table per image offset for the same
reason.  With that bookkeeping the residual of the assembled balance
measures only the time-stencil and integrator error.  The time derivative
uses a fourth-order centered stencil over the last five trajectory
snapshots.  One-dimensional grids only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateSeries, InsufficientSnapshots
from .fermions import Grid, ManyBodyState, ReducedDensityMatrix, reduced_density
from .husimi import (
    PhaseGrid,
    _coherent_bilinear_1,
    _coherent_bilinear_2,
    _cyclic_tables,
    _image_envelopes,
    _is_lattice_momenta,
    _norm_factors,
    default_phase_grid,
    husimi_k,
)
from .phasespace import CoherentWindow, Potential
from .propagate import Trajectory

__all__ = [
    "GL_ORDER_DEFAULT",
    "SCALING_CSV_FIELDS",
    "HierarchyFields",
    "HierarchyTerms",
    "PairRemainders",
    "ScalingFit",
    "remainder_r1",
    "remainder_r1_pointwise",
    "remainder_r1_tilde",
    "remainder_k2",
    "hierarchy_fields",
    "weak_residual",
    "mvt_residual",
    "hbar_scaling_fit",
    "write_scaling_csv",
]

GL_ORDER_DEFAULT = 8

SCALING_CSV_FIELDS = ("N", "hbar", "term", "pairing_value", "slope", "slope_se")


@dataclass(frozen=True)
class HierarchyFields:
    """Pointwise terms of the order-k transport balance on a phase grid.

    All derivative applications are included: ``transport`` is p.grad_q of
    the measure, ``interaction`` and ``remainder_p`` are momentum
    divergences, ``remainder_q`` is a position divergence, ``remainder_hat``
    enters undifferentiated.  ``residual`` is time_derivative + transport -
    interaction - remainder_q - remainder_p - remainder_hat and vanishes
    along the exact flow.
    """

    k: int
    t: float
    hbar: float
    phase_grid: PhaseGrid
    time_derivative: np.ndarray
    transport: np.ndarray
    interaction: np.ndarray
    remainder_q: np.ndarray
    remainder_p: np.ndarray
    remainder_hat: np.ndarray
    residual: np.ndarray


@dataclass(frozen=True)
class HierarchyTerms:
    """Weak-form pairings of the balance terms against one test function."""

    k: int
    t: float
    time_derivative: float
    transport: float
    interaction: float
    remainder_q: float
    remainder_p: float
    remainder_hat: float
    residual: float
    scale: float

    @property
    def relative_residual(self) -> float:
        return abs(self.residual) / self.scale if self.scale > 0 else 0.0


@dataclass(frozen=True)
class PairRemainders:
    """Remainder fields of the two-particle balance on a pair phase grid.

    ``r2`` and ``r2_tilde`` carry one component per particle slot in the
    trailing axis; ``r2_hat`` is scalar.  ``r2_tilde`` is None when the
    smeared interaction remainder was not requested.  The smeared field
    evaluates its force average along principal-image segments; the balance
    assembly differentiates the image-resolved form instead, and the two
    agree up to the window mass crossing half the period.
    """

    r2: np.ndarray
    r2_tilde: np.ndarray | None
    r2_hat: np.ndarray
    phase_grid: PhaseGrid
    hbar: float


@dataclass(frozen=True)
class ScalingFit:
    """Log-log least-squares fit of a decay series against hbar."""

    slope: float
    slope_se: float
    intercept: float
    n_used: int
    excluded: tuple[int, ...]
    log_hbar: np.ndarray
    log_values: np.ndarray


def _require_1d(window: CoherentWindow) -> None:
    if window.grid.d != 1:
        raise ValueError("hierarchy fields are implemented for d=1 grids only")


def _require_hbar(window: CoherentWindow, hbar: float) -> None:
    if abs(window.hbar - hbar) > 1e-12:
        raise ValueError(
            f"window hbar {window.hbar} does not match the state scaling {hbar}"
        )


def _require_lattice(pg: PhaseGrid, window: CoherentWindow) -> None:
    if not _is_lattice_momenta(pg.ps, window.hbar, window.grid.L):
        raise ValueError(
            "image-resolved interaction terms need momenta on the lattice "
            "hbar*(2*pi/L)*Z; see default_phase_grid"
        )


def _gl_nodes(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    if order < 1:
        raise ValueError("quadrature order must be positive")
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def _segment_force_table(potential: Potential, grid: Grid, order: int,
                         ket_shift: float = 0.0) -> np.ndarray:
    """W[w, u, y] = int_0^1 ds V'(s x_u + (1-s)(x_w + ket_shift) - x_y).

    ``ket_shift`` displaces the ket endpoint onto another period image; the
    force is periodic but the averaging segment is not, so shifted images
    need their own tables.
    """
    x = grid.sites()[:, 0]
    nodes, weights = _gl_nodes(order)
    W = np.zeros((x.size, x.size, x.size))
    for s, wgt in zip(nodes, weights):
        arg = (s * x[None, :, None] + (1.0 - s) * (x[:, None, None] + ket_shift)
               - x[None, None, :])
        W += wgt * potential.force_at(arg[..., None])[..., 0]
    return W


def _pair_diag(kernel2: np.ndarray, M: int) -> np.ndarray:
    """D[u, y, w] = gamma2(u, y; w, y), the field leg on the diagonal."""
    return np.einsum("uywy->uyw", kernel2.reshape(M, M, M, M))


def _env_tables(window: CoherentWindow, qs: np.ndarray
                ) -> tuple[dict[tuple, np.ndarray], np.ndarray, np.ndarray]:
    """Per-image envelope tables with their plain and image-weighted sums."""
    env = _image_envelopes(window, qs)
    tot = sum(env.values())
    wtot = sum(float(s[0]) * tab for s, tab in env.items())
    if not isinstance(wtot, np.ndarray):
        wtot = np.zeros_like(tot)
    return env, tot, wtot


def _site_phases(grid: Grid, ps: np.ndarray, hbar: float) -> np.ndarray:
    return np.exp(1j * (grid.sites() @ ps.T) / hbar)


def remainder_r1(rdm: ReducedDensityMatrix, window: CoherentWindow,
                 phase_grid: PhaseGrid) -> np.ndarray:
    """Position-transport remainder of the one-particle balance, shape (Q, P).

    The field is hbar times the imaginary part of the kernel bilinear
    between the coherent state and its center derivative; it vanishes for
    kernels that are real in position space at p = 0 and is damped by one
    factor of sqrt(hbar) relative to the measure.
    """
    _require_1d(window)
    window.grid.require_same(rdm.grid, "window and reduced density matrix")
    if rdm.k != 1:
        raise ValueError(f"one-particle remainder needs a k=1 kernel, got k={rdm.k}")
    vals = _coherent_bilinear_1(rdm.kernel, window, phase_grid, ket_grad=True)
    return window.hbar * np.imag(vals)


def remainder_r1_pointwise(rdm: ReducedDensityMatrix, window: CoherentWindow,
                           q: float, p: float) -> float:
    """Quadrature oracle for :func:`remainder_r1` at a single phase point.

    Builds the coherent state and its center derivative by explicit image
    sums and contracts the kernel directly; retained as the reference the
    table path is validated against.
    """
    _require_1d(window)
    from .phasespace import _PROFILES, _image_shifts

    g = window.grid
    hbar = window.hbar
    y = g.sites()[:, 0]
    rh = math.sqrt(hbar)
    prof, gradf = _PROFILES[window.kind][0], _PROFILES[window.kind][1]
    acc = np.zeros(g.M, dtype=complex)
    gacc = np.zeros(g.M, dtype=complex)
    for sh in _image_shifts(window):
        shift = g.L * float(sh[0])
        x = (y - q + shift) / rh
        ph = np.exp(1j * p * (y + shift) / hbar)
        acc += prof(x[:, None], 1) * ph
        gacc += (-1.0 / rh) * gradf(x[:, None], 1)[:, 0] * ph
    nrm2 = g.wq * float(np.vdot(acc, acc).real)
    val = g.wq**2 * (acc.conj() @ rdm.kernel @ gacc) / nrm2
    return float(hbar * val.imag)


def _smeared_field_1(kernel2: np.ndarray, window: CoherentWindow,
                     pg: PhaseGrid, potential: Potential,
                     order: int) -> np.ndarray:
    """Smeared interaction field of the one-particle balance, shape (Q, P).

    Contracts the diagonal gamma2(u, y; w, y) against the segment-averaged
    force between the bra and ket window positions, one force table per
    bra-to-ket image offset, and transforms the result like a measure.
    Real by construction up to rounding (the kernel block is hermitian).
    """
    g = window.grid
    hbar = window.hbar
    M = g.M
    env, tot, _ = _env_tables(window, pg.qs)
    add, _ = _cyclic_tables(g)
    norms = _norm_factors(env, pg.ps, hbar, g.L, g.wq, True)
    D = _pair_diag(kernel2, M)
    ar = np.arange(M)
    shifts = sorted(s[0] for s in env)
    Q = pg.qs.shape[0]
    B = np.zeros((Q, M), dtype=complex)
    for delta in range(shifts[0] - shifts[-1], shifts[-1] - shifts[0] + 1):
        pair = np.zeros((Q, M, M))
        hit = False
        for s in shifts:
            if (s + delta,) in env:
                pair += env[(s,)][:, :, None] * env[(s + delta,)][:, add]
                hit = True
        if not hit:
            continue
        W = _segment_force_table(potential, g, order, ket_shift=delta * g.L)
        A = g.wq * np.einsum("wuy,uyw->uw", W, D)
        B += np.sum(pair * A[ar[:, None], add][None], axis=1)
    raw = g.wq**2 * (B @ _site_phases(g, pg.ps, hbar))
    return hbar ** g.d * np.real(raw / norms)


def _interaction_contraction_1(m2_values: np.ndarray, pg: PhaseGrid,
                               potential: Potential) -> np.ndarray:
    """(2 pi)^-d integral of V'(q - q2) against the pair measure, shape (Q, P)."""
    qs = pg.qs[:, 0]
    Vp = potential.force_at((qs[:, None] - qs[None, :])[..., None])[..., 0]
    msum = m2_values.sum(axis=3) * pg.p_weight
    return (pg.q_weight / (2.0 * np.pi)) * np.einsum("ij,ipj->ip", Vp, msum)


def remainder_r1_tilde(rdm2: ReducedDensityMatrix, window: CoherentWindow,
                       phase_grid: PhaseGrid, potential: Potential,
                       m2, order: int = GL_ORDER_DEFAULT) -> np.ndarray:
    """Momentum-transport remainder of the one-particle balance, shape (Q, P).

    Difference between the smeared interaction bilinear (the frame sum over
    the second particle collapsed onto the position diagonal) and the
    mean-field contraction of the supplied pair measure.  The subtraction
    is exact for forces that are constant across the window support; the
    pair measure must live on the same phase grid with full momentum-band
    coverage for the frame collapse to be quadrature-free.
    """
    _require_1d(window)
    window.grid.require_same(rdm2.grid, "window and reduced density matrix")
    _require_lattice(phase_grid, window)
    if rdm2.k != 2:
        raise ValueError(f"smeared remainder needs a k=2 kernel, got k={rdm2.k}")
    if m2.k != 2:
        raise ValueError(f"mean-field term needs a k=2 measure, got k={m2.k}")
    if m2.values.shape != (phase_grid.Q, phase_grid.P, phase_grid.Q, phase_grid.P):
        raise ValueError("pair measure does not match the requested phase grid")
    smeared = _smeared_field_1(rdm2.kernel, window, phase_grid, potential, order)
    return smeared - _interaction_contraction_1(m2.values, phase_grid, potential)


def _collapsed_interaction_rows(kernel2: np.ndarray, window: CoherentWindow,
                                pg: PhaseGrid, potential: Potential
                                ) -> np.ndarray:
    """Per-position kernels B[i] whose window bilinear is the mean-field term.

    The second-particle frame sum over the full lattice phase grid collapses
    onto the position diagonal, leaving the force smeared by the window mass
    profile; the pair measure itself is never formed.
    """
    g = window.grid
    hbar = window.hbar
    M = g.M
    sites = g.sites()
    env_int = _image_envelopes(window, sites)
    tot_int = sum(env_int.values())
    n_int = float(g.wq * np.sum(tot_int[0] ** 2))
    qs = pg.qs[:, 0]
    Vp = potential.force_at((qs[:, None] - sites[:, 0][None, :])[..., None])[..., 0]
    gq = pg.q_weight * (Vp @ tot_int**2)  # (Q, M) smeared force profile
    D = _pair_diag(kernel2, M)
    pref = hbar * g.wq**2 / (g.dq * n_int)
    return pref * np.einsum("iy,uyw->iuw", gq, D)


def _row_tables(rows: np.ndarray, tot: np.ndarray, wtot: np.ndarray,
                add: np.ndarray, wraps: np.ndarray, wq: float
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Offset tables of per-row kernels, with the image-derivative variants.

    Returns (base, imgdiff, wrap) of shape (Q, M): the plain bilinear table,
    the table weighted by the bra-to-ket image offset, and the wrap-masked
    table.  A momentum derivative multiplies the transform of ``base`` by
    i*y_s/hbar and adds (i*L/hbar) times the transform of imgdiff - wrap.
    """
    Q, M = tot.shape
    ar = np.arange(M)
    wr = wraps[..., 0].astype(float)
    base = np.empty((Q, M), dtype=complex)
    idiff = np.empty((Q, M), dtype=complex)
    wrapt = np.empty((Q, M), dtype=complex)
    for i in range(Q):
        Kg = rows[i][ar[:, None], add]
        pb = tot[i][:, None] * tot[i][add]
        pd = tot[i][:, None] * wtot[i][add] - wtot[i][:, None] * tot[i][add]
        base[i] = wq**2 * np.sum(pb * Kg, axis=0)
        idiff[i] = wq**2 * np.sum(pd * Kg, axis=0)
        wrapt[i] = wq**2 * np.sum(pb * wr * Kg, axis=0)
    return base, idiff, wrapt


def _interaction_dp_1(kernel2: np.ndarray, window: CoherentWindow,
                      pg: PhaseGrid, potential: Potential) -> np.ndarray:
    """Analytic momentum derivative of the mean-field term, shape (Q, P).

    Differentiating the bilinear brings down the covering-line displacement
    y_s + j*L of each image pair; the three table variants resolve it
    exactly, which a spectral derivative of the sampled field cannot.
    """
    g = window.grid
    hbar = window.hbar
    rows = _collapsed_interaction_rows(kernel2, window, pg, potential)
    env, tot, wtot = _env_tables(window, pg.qs)
    add, wraps = _cyclic_tables(g)
    norms = _norm_factors(env, pg.ps, hbar, g.L, g.wq, True)
    base, idiff, wrapt = _row_tables(rows, tot, wtot, add, wraps, g.wq)
    Ph0 = _site_phases(g, pg.ps, hbar)
    ys = g.sites()[:, 0]
    raw = (base * ys[None, :]) @ Ph0 + g.L * ((idiff - wrapt) @ Ph0)
    return np.real(1j / hbar * raw / norms)


def _commutator_field_1(kernel2: np.ndarray, window: CoherentWindow,
                        pg: PhaseGrid, potential: Potential,
                        n_particles: int) -> np.ndarray:
    """Interaction part of d/dt of the one-particle measure, shape (Q, P).

    Equals the momentum divergence of mean-field term plus smeared
    remainder; evaluated directly from the potential-weighted diagonal of
    the pair kernel, which involves no segment averaging and no image
    resolution (the potential is periodic).
    """
    g = window.grid
    M = g.M
    x = g.sites()[:, 0]
    Vt = potential.v_at((x[:, None] - x[None, :])[..., None])  # [w, y]
    D = _pair_diag(kernel2, M)
    B = g.wq * np.einsum("wy,uyw->uw", Vt, D)
    vals = _coherent_bilinear_1(B, window, pg)
    return -(2.0 / (window.hbar * n_particles)) * np.imag(vals)


def _pair_difference_kernel(kernel2: np.ndarray, grid: Grid,
                            potential: Potential) -> np.ndarray:
    """gamma2 weighted by the potential gap between bra and ket leg pairs."""
    M = grid.M
    x = grid.sites()[:, 0]
    Vd = potential.v_at((x[:, None] - x[None, :])[..., None])
    k4 = kernel2.reshape(M, M, M, M)
    return (Vd[:, :, None, None] - Vd[None, None, :, :]) * k4


def _gamma3_slot_kernels(state: ManyBodyState, weight: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Slot kernels K_j[u1,u2,w1,w2] = c3 wq^(N-2) sum_y weight[w_j,u_j,y]
    gamma3(u1,u2,y; w1,w2,y), without materializing gamma3.

    ``weight`` has shape (M, M, M) indexed [ket, bra, field]; dense states
    with N in (3, 4).
    """
    M = state.grid.M
    wq = state.grid.wq
    psi = state.amplitudes
    c3 = math.factorial(state.N) // math.factorial(state.N - 3)
    scale = c3 * wq * wq ** (state.N - 3)
    K1 = np.zeros((M, M, M, M), dtype=complex)
    K2 = np.zeros((M, M, M, M), dtype=complex)
    for y in range(M):
        if state.N == 3:
            Gy = psi[:, :, y][:, :, None, None] * psi[:, :, y].conj()[None, None, :, :]
        else:
            slab = psi[:, :, y, :].reshape(M * M, M)
            Gy = (slab @ slab.conj().T).reshape(M, M, M, M)
        Wy = weight[:, :, y]  # [w, u]
        K1 += scale * Gy * Wy.T[:, None, :, None]
        K2 += scale * Gy * Wy.T[None, :, None, :]
    return K1, K2


def _pair_interaction_terms(state: ManyBodyState, window: CoherentWindow,
                            pg: PhaseGrid, potential: Potential
                            ) -> tuple[np.ndarray, ...]:
    """Mean-field contractions of the three-particle measure and their
    analytic slot-momentum derivatives: (C1, C2, dC1, dC2), each (Q,P,Q,P).

    Exploits the exact collapse of the third-slot frame sum onto the
    position diagonal and the rank-one structure of the dense three-body
    kernel; the three-particle measure is never built.  Dense N=3 only
    (identically zero for N=2).
    """
    g = window.grid
    hbar = window.hbar
    Q, P = pg.Q, pg.P
    shape = (Q, P, Q, P)
    if state.N == 2:
        z = np.zeros(shape)
        return z, z.copy(), z.copy(), z.copy()
    if state.backend != "dense" or state.N != 3:
        raise ValueError(
            "pair interaction contraction needs a dense state with N in (2, 3)"
        )
    M = g.M
    sites = g.sites()
    psi = state.amplitudes
    env_int = _image_envelopes(window, sites)
    tot_int = sum(env_int.values())
    n_int = float(g.wq * np.sum(tot_int[0] ** 2))
    env, tot, wtot = _env_tables(window, pg.qs)
    norms = _norm_factors(env, pg.ps, hbar, g.L, g.wq, True)
    Ph0 = _site_phases(g, pg.ps, hbar)
    x = sites[:, 0]
    F = (tot.T[:, :, None] * Ph0[:, None, :]).reshape(M, Q * P)
    Fd = ((x[:, None] * tot.T + g.L * wtot.T)[:, :, None]
          * Ph0[:, None, :]).reshape(M, Q * P)
    qs = pg.qs[:, 0]
    Vp = potential.force_at((qs[:, None] - x[None, :])[..., None])[..., 0]
    G = pg.q_weight * (Vp @ tot_int**2)  # (Q, M) smeared force profile
    pref = (hbar / g.dq) * 6.0 * g.wq**6 / n_int
    n = Q * P
    nrm = norms.reshape(n)
    grow = np.repeat(G, P, axis=0)  # (n, M), force profile at the slot center
    C1 = np.zeros((n, n))
    C2 = np.zeros((n, n))
    dC1 = np.zeros((n, n))
    dC2 = np.zeros((n, n))
    Fc, Fdc = F.conj(), Fd.conj()
    for c in range(M):
        T1 = psi[:, :, c] @ Fc  # (M, n)
        U = Fc.T @ T1           # (n, n) pair bracket, both legs conjugated
        V1 = Fdc.T @ T1
        V2 = Fc.T @ (psi[:, :, c] @ Fdc)
        absU = (U.conj() * U).real
        D1 = (2.0 / hbar) * (U.conj() * V1).imag
        D2 = (2.0 / hbar) * (U.conj() * V2).imag
        C1 += grow[:, c][:, None] * absU
        C2 += grow[:, c][None, :] * absU
        dC1 += grow[:, c][:, None] * D1
        dC2 += grow[:, c][None, :] * D2
    scale = pref / (nrm[:, None] * nrm[None, :])
    return (
        (scale * C1).reshape(shape),
        (scale * C2).reshape(shape),
        (scale * dC1).reshape(shape),
        (scale * dC2).reshape(shape),
    )


def remainder_k2(state: ManyBodyState, window: CoherentWindow,
                 phase_grid: PhaseGrid, potential: Potential,
                 order: int = GL_ORDER_DEFAULT,
                 include_tilde: bool = True) -> PairRemainders:
    """Remainder fields of the two-particle balance on a pair phase grid.

    The position remainder and the pair-potential remainder contract the
    two-particle kernel only and work for any state with k=2 capacity; the
    smeared interaction remainder touches the three-particle diagonal and
    is limited to dense states with N <= 3 (it vanishes identically for
    N=2).  Pass include_tilde=False to skip it.

    The reported pair-potential remainder carries the hbar**2 prefactor of
    the unscaled pair commutator.  The balance assembled by
    hierarchy_fields weights the same bilinear with hbar**(d-1) instead,
    which is what the transport identity demands in d dimensions; the two
    agree in d=3 and differ by a known power elsewhere.
    """
    _require_1d(window)
    _require_hbar(window, state.hbar)
    _require_lattice(phase_grid, window)
    g = window.grid
    hbar = window.hbar
    rdm2 = reduced_density(state, 2)
    r2 = np.stack(
        [hbar * np.imag(_coherent_bilinear_2(rdm2.kernel, window, phase_grid,
                                             ket_grad=j))
         for j in (1, 2)],
        axis=-1,
    )
    X = _pair_difference_kernel(rdm2.kernel, g, potential)
    r2_hat = hbar**2 * np.imag(_coherent_bilinear_2(X, window, phase_grid))
    r2_tilde = None
    if include_tilde:
        if state.N > 3 or state.backend != "dense":
            raise ValueError(
                "smeared pair remainder needs a dense state with N <= 3; "
                "pass include_tilde=False for the two-particle kernels alone"
            )
        Q, P = phase_grid.Q, phase_grid.P
        if state.N == 2:
            r2_tilde = np.zeros((Q, P, Q, P, 2))
        else:
            W = _segment_force_table(potential, g, order)
            Y1, Y2 = _gamma3_slot_kernels(state, W)
            C1, C2, _, _ = _pair_interaction_terms(state, window, phase_grid,
                                                   potential)
            s1 = hbar ** g.d * np.real(
                _coherent_bilinear_2(Y1, window, phase_grid))
            s2 = hbar ** g.d * np.real(
                _coherent_bilinear_2(Y2, window, phase_grid))
            r2_tilde = np.stack([s1 - C1, s2 - C2], axis=-1)
    return PairRemainders(r2=r2, r2_tilde=r2_tilde, r2_hat=r2_hat,
                          phase_grid=phase_grid, hbar=hbar)


def _spectral_derivative(values: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    freq = 2.0 * np.pi * np.fft.fftfreq(values.shape[axis], d=spacing)
    shape = [1] * values.ndim
    shape[axis] = values.shape[axis]
    out = np.fft.ifft(1j * freq.reshape(shape) * np.fft.fft(values, axis=axis),
                      axis=axis)
    return np.real(out)


def _stencil_window(times: Sequence[float]) -> tuple[int, float]:
    """Index of the stencil center among the last five snapshots and the step."""
    if len(times) < 5:
        raise InsufficientSnapshots(
            f"time-derivative stencil needs five snapshots, got {len(times)}"
        )
    tail = np.asarray(times[-5:], dtype=float)
    steps = np.diff(tail)
    if steps[0] <= 0 or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ValueError("the last five snapshots must be uniformly spaced")
    return len(times) - 3, float(steps[0])


def _time_derivative(fields: Sequence[np.ndarray], delta: float) -> np.ndarray:
    f_m2, f_m1, _, f_p1, f_p2 = fields
    return (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * delta)


def hierarchy_fields(trajectory: Trajectory, k: int, window: CoherentWindow,
                     potential: Potential,
                     order: int = GL_ORDER_DEFAULT) -> HierarchyFields:
    """Assemble the order-k balance pointwise on the full lattice phase grid.

    The last five snapshots feed the time stencil and the middle one feeds
    every other term.  Position derivatives are spectral; momentum
    derivatives are analytic image-resolved bilinears, so the residual
    field measures only the stencil and integrator error.
    """
    _require_1d(window)
    if k not in (1, 2):
        raise ValueError(f"balance is assembled for k in (1, 2), got k={k}")
    states = trajectory.states
    center, delta = _stencil_window(trajectory.times)
    sc = states[center]
    _require_hbar(window, sc.hbar)
    window.grid.require_same(sc.grid, "window and trajectory")
    g = sc.grid
    hbar = window.hbar
    pg = default_phase_grid(g, hbar)
    dq = float(g.dq)
    tail = states[len(states) - 5:]

    if k == 1:
        ms = [husimi_k(reduced_density(s, 1), window, pg).values for s in tail]
        dtm = _time_derivative(ms, delta)
        transport = pg.ps[:, 0][None, :] * _spectral_derivative(ms[2], 0, dq)
        k2 = reduced_density(sc, 2).kernel
        r1 = remainder_r1(reduced_density(sc, 1), window, pg)
        remainder_q = _spectral_derivative(r1, 0, dq)
        interaction = _interaction_dp_1(k2, window, pg, potential)
        rhs = _commutator_field_1(k2, window, pg, potential, sc.N)
        remainder_p = rhs - interaction
        remainder_hat = np.zeros_like(dtm)
    else:
        ms = [husimi_k(reduced_density(s, 2), window, pg).values for s in tail]
        dtm = _time_derivative(ms, delta)
        ps_col = pg.ps[:, 0]
        transport = (ps_col[None, :, None, None] * _spectral_derivative(ms[2], 0, dq)
                     + ps_col[None, None, None, :] * _spectral_derivative(ms[2], 2, dq))
        rdm2 = reduced_density(sc, 2)
        r2_1 = hbar * np.imag(_coherent_bilinear_2(rdm2.kernel, window, pg,
                                                   ket_grad=1))
        r2_2 = hbar * np.imag(_coherent_bilinear_2(rdm2.kernel, window, pg,
                                                   ket_grad=2))
        remainder_q = (_spectral_derivative(r2_1, 0, dq)
                       + _spectral_derivative(r2_2, 2, dq))
        X = _pair_difference_kernel(rdm2.kernel, g, potential)
        remainder_hat = hbar ** (g.d - 1) * np.imag(
            _coherent_bilinear_2(X, window, pg))
        if sc.N == 2:
            interaction = np.zeros_like(dtm)
            remainder_p = np.zeros_like(dtm)
        else:
            _, _, dC1, dC2 = _pair_interaction_terms(sc, window, pg, potential)
            interaction = dC1 + dC2
            x = g.sites()[:, 0]
            Vt = potential.v_at((x[:, None] - x[None, :])[..., None])
            weight = np.broadcast_to(Vt[:, None, :], (g.M, g.M, g.M))
            Z1, Z2 = _gamma3_slot_kernels(sc, weight)
            coef = -(2.0 / (hbar * sc.N))
            rhs = coef * (np.imag(_coherent_bilinear_2(Z1, window, pg))
                          + np.imag(_coherent_bilinear_2(Z2, window, pg)))
            remainder_p = rhs - interaction

    residual = (dtm + transport - interaction - remainder_q - remainder_p
                - remainder_hat)
    return HierarchyFields(
        k=k, t=float(trajectory.times[center]), hbar=hbar, phase_grid=pg,
        time_derivative=dtm, transport=transport, interaction=interaction,
        remainder_q=remainder_q, remainder_p=remainder_p,
        remainder_hat=remainder_hat, residual=residual,
    )


def _pairing(phi: np.ndarray, field: np.ndarray, pg: PhaseGrid, k: int) -> float:
    cell = pg.q_weight * pg.p_weight / (2.0 * np.pi) ** pg.d
    return float(np.sum(phi * field) * cell**k)


def weak_residual(trajectory: Trajectory, k: int, window: CoherentWindow,
                  potential: Potential, test_fn,
                  order: int = GL_ORDER_DEFAULT) -> HierarchyTerms:
    """Pair the order-k balance against a test function.

    For k=1 ``test_fn`` is a single phase-space test function; for k=2 a
    pair whose tensor product forms the two-slot test function.  The
    residual is the signed sum of the pairings and its natural scale is the
    largest pairing magnitude.
    """
    fields = hierarchy_fields(trajectory, k, window, potential, order=order)
    pg = fields.phase_grid
    if k == 1:
        phi = np.asarray(test_fn.values, dtype=float)
        if phi.shape != (pg.Q, pg.P):
            raise ValueError("test function does not match the phase grid")
    else:
        fa, fb = test_fn
        va = np.asarray(fa.values, dtype=float)
        vb = np.asarray(fb.values, dtype=float)
        if va.shape != (pg.Q, pg.P) or vb.shape != (pg.Q, pg.P):
            raise ValueError("test functions do not match the phase grid")
        phi = va[:, :, None, None] * vb[None, None, :, :]
    td = _pairing(phi, fields.time_derivative, pg, k)
    tr = _pairing(phi, fields.transport, pg, k)
    inter = _pairing(phi, fields.interaction, pg, k)
    rq = _pairing(phi, fields.remainder_q, pg, k)
    rp = _pairing(phi, fields.remainder_p, pg, k)
    rh = _pairing(phi, fields.remainder_hat, pg, k)
    residual = td + tr - inter - rq - rp - rh
    scale = max(abs(v) for v in (td, tr, inter, rq, rp, rh))
    return HierarchyTerms(k=k, t=fields.t, time_derivative=td, transport=tr,
                          interaction=inter, remainder_q=rq, remainder_p=rp,
                          remainder_hat=rh, residual=residual, scale=scale)


def mvt_residual(potential: Potential, triples: np.ndarray,
                 order: int = GL_ORDER_DEFAULT) -> float:
    """Worst defect of the segment-averaged force identity on given triples.

    For rows (w, u, y) compares V(u-y) - V(w-y) with the Gauss-Legendre
    average of V' along the segment from w to u times (u - w); this is the
    identity the smeared interaction kernel relies on.
    """
    triples = np.asarray(triples, dtype=float)
    if triples.ndim != 2 or triples.shape[1] != 3:
        raise ValueError("triples must be an (n, 3) array of (w, u, y) rows")
    w, u, y = triples[:, 0], triples[:, 1], triples[:, 2]
    lhs = potential.v_at((u - y)[:, None]) - potential.v_at((w - y)[:, None])
    nodes, weights = _gl_nodes(order)
    rhs = np.zeros_like(lhs)
    for s, wgt in zip(nodes, weights):
        rhs += wgt * potential.force_at((s * u + (1.0 - s) * w - y)[:, None])[:, 0]
    rhs *= u - w
    return float(np.max(np.abs(lhs - rhs)))


def hbar_scaling_fit(hbars: Sequence[float],
                     values: Sequence[float]) -> ScalingFit:
    """Fit log(value) = intercept + slope * log(hbar) by least squares.

    Non-finite and non-positive values are excluded and reported; fewer
    than three usable points raise DegenerateSeries.  The hbar series must
    be positive and strictly decreasing.
    """
    h = np.asarray(hbars, dtype=float)
    v = np.asarray(values, dtype=float)
    if h.shape != v.shape or h.ndim != 1:
        raise ValueError("hbar and value series must be equal-length vectors")
    if np.any(h <= 0) or np.any(np.diff(h) >= 0):
        raise ValueError("hbar series must be positive and strictly decreasing")
    usable = np.isfinite(v) & (v > 0)
    excluded = tuple(int(i) for i in np.nonzero(~usable)[0])
    if int(usable.sum()) < 3:
        raise DegenerateSeries(
            f"scaling fit needs at least three positive values, "
            f"got {int(usable.sum())}"
        )
    x = np.log(h[usable])
    y = np.log(v[usable])
    xc = x - x.mean()
    sxx = float(np.sum(xc * xc))
    slope = float(np.sum(xc * y) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    dof = x.size - 2
    var = float(np.sum(resid**2) / dof) if dof > 0 else 0.0
    return ScalingFit(
        slope=slope, slope_se=math.sqrt(var / sxx), intercept=intercept,
        n_used=int(usable.sum()), excluded=excluded, log_hbar=x, log_values=y,
    )


def write_scaling_csv(path: str | Path,
                      rows: Iterable[Mapping[str, object]]) -> None:
    """Write scaling-study rows with the canonical header."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SCALING_CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
