"""Schrödinger evolution under the mean-field-scaled Hamiltonian.

H = (hbar^2/2) sum_j (-Laplacian_j) + (1/2N) sum_{i != j} V(x_i - x_j),
propagated with Strang splitting on the dense backend and Lanczos
exponentials on the occupation backend.  hbar is always the state's own
N**(-1/d); there is no way to pass a different scale in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import ConfigInvalid
from .fermions import ManyBodyState, _parity_sign, kinetic_energy, save_state
from .gridio import write_sidecar
from .phasespace import Grid, Potential

HOP_CACHE_MAX = 60_000_000


@dataclass(frozen=True)
class EvolutionConfig:
    """Integration parameters; dt=None resolves to 0.01*hbar at run time."""

    T: float
    dt: float | None = None
    method: str | None = None
    krylov_dim: int = 30
    tolerance_energy_drift: float = 1e-6

    def __post_init__(self) -> None:
        problems = []
        if self.T == 0.0:
            problems.append(("T", "final time must be nonzero"))
        if self.dt is not None:
            if self.dt <= 0.0:
                problems.append(("dt", "step must be positive"))
            elif abs(self.T) < self.dt:
                problems.append(("T", "|T| must be at least dt"))
        if self.method not in (None, "strangSplit", "krylovExp"):
            problems.append(("method", f"unknown method {self.method!r}"))
        if self.krylov_dim < 8:
            problems.append(("krylov_dim", "subspace size must be >= 8"))
        if self.tolerance_energy_drift <= 0.0:
            problems.append(("tolerance_energy_drift", "must be positive"))
        if problems:
            raise ConfigInvalid(problems)


@dataclass
class Trajectory:
    """Snapshots of one evolution, with its conservation bookkeeping."""

    times: list[float]
    states: list[ManyBodyState]
    energies: np.ndarray
    method: str
    dt: float
    potential: Potential
    config: EvolutionConfig
    energy_drift_exceeded: bool


def _pair_potential_table(grid: Grid, potential: Potential) -> np.ndarray:
    sites = grid.sites()
    diff = sites[:, None, :] - sites[None, :, :]
    return potential.v_at(diff.reshape(-1, grid.d)).reshape(grid.M, grid.M)


def _interaction_tensor(grid: Grid, N: int, potential: Potential) -> np.ndarray:
    """U(x_1..x_N) = (1/2N) sum_{i != j} V(x_i - x_j) on the full tensor grid."""
    vtab = _pair_potential_table(grid, potential)
    U = np.zeros((grid.M,) * N)
    for i in range(N):
        for j in range(i + 1, N):
            shape = [1] * N
            shape[i] = grid.M
            shape[j] = grid.M
            U = U + vtab.reshape(shape) / N
    return U


def _kinetic_mode_sq(grid: Grid) -> np.ndarray:
    ksq = np.zeros((grid.Mq,) * grid.d)
    for axis in range(grid.d):
        shape = [1] * grid.d
        shape[axis] = grid.Mq
        ksq = ksq + (grid.k1**2).reshape(shape)
    return ksq


def _one_body_kinetic_matrix(grid: Grid, hbar: float) -> np.ndarray:
    """<s| (hbar^2/2)(-Laplacian) |t> between unit site vectors."""
    cols = np.eye(grid.M, dtype=complex).reshape((grid.Mq,) * grid.d + (grid.M,))
    ft = np.fft.fftn(cols, axes=tuple(range(grid.d)))
    ft *= (0.5 * hbar**2 * _kinetic_mode_sq(grid))[..., None]
    out = np.fft.ifftn(ft, axes=tuple(range(grid.d))).reshape(grid.M, grid.M)
    return out


class _DenseHamiltonian:
    def __init__(self, grid: Grid, N: int, potential: Potential):
        self.grid, self.N = grid, N
        self.hbar = float(N) ** (-1.0 / grid.d)
        self.U = _interaction_tensor(grid, N, potential)
        ksq1 = _kinetic_mode_sq(grid)
        kin = np.zeros((grid.Mq,) * (grid.d * N))
        for j in range(N):
            shape = [1] * (grid.d * N)
            for axis in range(grid.d):
                shape[j * grid.d + axis] = grid.Mq
            kin = kin + ksq1.reshape(shape)
        self.kin_modes = 0.5 * self.hbar**2 * kin  # total kinetic symbol

    def apply(self, psi: np.ndarray) -> np.ndarray:
        shape = (self.grid.Mq,) * (self.grid.d * self.N)
        ft = np.fft.fftn(psi.reshape(shape))
        out = np.fft.ifftn(self.kin_modes * ft).reshape(psi.shape)
        return out + self.U.reshape(psi.shape) * psi

    def strang_step_factors(self, h: float) -> tuple[np.ndarray, np.ndarray]:
        half_kin = np.exp(-0.5j * h / self.hbar * self.kin_modes)
        full_pot = np.exp(-1j * h / self.hbar * self.U)
        return half_kin, full_pot


class _OccupationHamiltonian:
    """Subset-basis matvec: diagonal interaction + one-body kinetic hops."""

    def __init__(self, grid: Grid, N: int, potential: Potential, basis: np.ndarray):
        self.grid, self.N, self.basis = grid, N, basis
        self.hbar = float(N) ** (-1.0 / grid.d)
        self.tmat = _one_body_kinetic_matrix(grid, self.hbar)
        combos = self._combos_for(basis, grid.M, N)
        vtab = _pair_potential_table(grid, potential)
        diag = np.zeros(basis.shape[0])
        for i in range(N):
            diag += self.tmat[combos[:, i], combos[:, i]].real
            for j in range(i + 1, N):
                diag += vtab[combos[:, i], combos[:, j]] / N
        self.diag = diag
        self._occ = np.zeros((grid.M, basis.shape[0]), dtype=bool)
        for s in range(grid.M):
            self._occ[s] = (basis & (np.uint64(1) << np.uint64(s))) != 0
        n_hops = basis.shape[0] * N * (grid.M - N) // 2
        self._cache = self._build_hop_cache() if n_hops <= HOP_CACHE_MAX else None

    @staticmethod
    def _combos_for(basis: np.ndarray, M: int, N: int) -> np.ndarray:
        out = np.zeros((basis.shape[0], N), dtype=np.int64)
        col = np.zeros(basis.shape[0], dtype=np.int64)
        for s in range(M):
            has = (basis & (np.uint64(1) << np.uint64(s))) != 0
            out[has, col[has]] = s
            col[has] += 1
        return out

    def _hops_for(self, s: int, t: int):
        """Index triples of a*_s a_t on basis states (t occupied, s empty)."""
        one = np.uint64(1)
        bit_s, bit_t = one << np.uint64(s), one << np.uint64(t)
        src = np.nonzero(self._occ[t] & ~self._occ[s])[0]
        masks = self.basis[src]
        sign = _parity_sign(masks & (bit_t - one))
        sign = sign * _parity_sign((masks ^ bit_t) & (bit_s - one))
        dst = np.searchsorted(self.basis, masks ^ bit_t ^ bit_s)
        return src.astype(np.uint32), dst.astype(np.uint32), sign.astype(np.int8)

    def _build_hop_cache(self):
        cache = []
        for s in range(self.grid.M):
            for t in range(s + 1, self.grid.M):
                cache.append((self.tmat[s, t], self._hops_for(s, t)))
        return cache

    def apply(self, v: np.ndarray) -> np.ndarray:
        out = self.diag * v
        if self._cache is not None:
            for coef, (src, dst, sign) in self._cache:
                w = sign * v[src]
                out[dst] += coef * w
                out[src] += np.conj(coef) * (sign * v[dst])
            return out
        for s in range(self.grid.M):
            for t in range(s + 1, self.grid.M):
                coef = self.tmat[s, t]
                src, dst, sign = self._hops_for(s, t)
                out[dst] += coef * (sign * v[src])
                out[src] += np.conj(coef) * (sign * v[dst])
        return out


def _build_hamiltonian(state: ManyBodyState, potential: Potential):
    state.grid.require_same(potential.grid, "state and potential")
    if state.backend == "dense":
        return _DenseHamiltonian(state.grid, state.N, potential)
    return _OccupationHamiltonian(state.grid, state.N, potential, state.basis)


def hamiltonian_apply(state: ManyBodyState, potential: Potential) -> np.ndarray:
    """H applied to the state's amplitude array (same layout, unnormalized)."""
    return _build_hamiltonian(state, potential).apply(state.amplitudes)


def _lattice_vdot(state: ManyBodyState, a: np.ndarray, b: np.ndarray) -> complex:
    scale = state.grid.wq**state.N if state.backend == "dense" else 1.0
    return complex(np.vdot(a, b) * scale)


def total_energy(state: ManyBodyState, potential: Potential) -> float:
    return _lattice_vdot(state, state.amplitudes, hamiltonian_apply(state, potential)).real


def _lanczos_expv(
    apply_h: Callable[[np.ndarray], np.ndarray],
    v: np.ndarray,
    theta: float,
    m: int,
) -> np.ndarray:
    """exp(-i*theta*H) v via a Hermitian Krylov subspace of size <= m."""
    nrm = np.linalg.norm(v)
    vecs = [v / nrm]
    alphas: list[float] = []
    betas: list[float] = []
    for j in range(m):
        w = apply_h(vecs[j])
        if j > 0:
            w = w - betas[j - 1] * vecs[j - 1]
        a = float(np.vdot(vecs[j], w).real)
        alphas.append(a)
        w = w - a * vecs[j]
        for u in vecs:  # full reorthogonalization; m is small
            w = w - np.vdot(u, w) * u
        b = float(np.linalg.norm(w))
        if j == m - 1 or b < 1e-14 * abs(a):
            break
        betas.append(b)
        vecs.append(w / b)
    lam, Q = eigh_tridiagonal(np.asarray(alphas), np.asarray(betas))
    coef = Q @ (np.exp(-1j * theta * lam) * Q[0])
    return nrm * (np.stack(vecs, axis=1) @ coef)


def _resolve(state: ManyBodyState, config: EvolutionConfig) -> tuple[float, str]:
    dt = config.dt if config.dt is not None else 0.01 * state.hbar
    method = config.method
    if method is None:
        method = "strangSplit" if state.backend == "dense" else "krylovExp"
    wants = "dense" if method == "strangSplit" else "occupation"
    if state.backend != wants:
        raise ConfigInvalid(
            [("method", f"{method} requires the {wants} backend, state is {state.backend}")]
        )
    if abs(config.T) < dt * (1.0 - 1e-12):
        raise ConfigInvalid([("T", "|T| must be at least dt")])
    return dt, method


def evolve(
    state: ManyBodyState,
    potential: Potential,
    config: EvolutionConfig,
    times: Sequence[float] | None = None,
) -> Trajectory:
    """Integrate to each requested time (first snapshot is always t=0)."""
    dt, method = _resolve(state, config)
    if times is None:
        times = [config.T]
    times = [float(t) for t in times]
    sgn = 1.0 if config.T > 0 else -1.0
    seq = [0.0] + [t for t in times if t != 0.0]
    for prev, nxt in zip(seq, seq[1:]):
        if sgn * (nxt - prev) <= 0 or sgn * nxt > sgn * config.T * (1 + 1e-12):
            raise ConfigInvalid(
                [("times", "snapshot times must move monotonically toward T")]
            )

    ham = _build_hamiltonian(state, potential)
    psi = state.amplitudes.copy()
    snapshots = [state]
    energies = [_lattice_vdot(state, psi, ham.apply(psi)).real]

    for prev, nxt in zip(seq, seq[1:]):
        span = nxt - prev
        n_steps = max(1, math.ceil(abs(span) / dt - 1e-9))
        h = span / n_steps
        if method == "strangSplit":
            half_kin, full_pot = ham.strang_step_factors(h)
            shape = (state.grid.Mq,) * (state.grid.d * state.N)
            work = psi.reshape(shape)
            pot = full_pot.reshape(shape)
            for _ in range(n_steps):
                work = np.fft.ifftn(half_kin * np.fft.fftn(work))
                work *= pot
                work = np.fft.ifftn(half_kin * np.fft.fftn(work))
            psi = work.reshape(psi.shape)
        else:
            for _ in range(n_steps):
                psi = _lanczos_expv(ham.apply, psi, h / state.hbar, config.krylov_dim)
        snap = ManyBodyState(
            grid=state.grid,
            N=state.N,
            backend=state.backend,
            amplitudes=psi.copy(),
            basis=state.basis,
        )
        snapshots.append(snap)
        energies.append(_lattice_vdot(state, psi, ham.apply(psi)).real)

    energies_arr = np.array(energies)
    # kinetic+interaction can cancel exactly, so scale by the kinetic part too
    kin_scale = state.N * kinetic_energy(state) / 2.0
    scale = max(abs(energies_arr[0]), kin_scale, 1e-12)
    drift = float(np.abs(energies_arr - energies_arr[0]).max() / scale)
    return Trajectory(
        times=seq,
        states=snapshots,
        energies=energies_arr,
        method=method,
        dt=dt,
        potential=potential,
        config=config,
        energy_drift_exceeded=drift > config.tolerance_energy_drift,
    )


@dataclass(frozen=True)
class KineticBoundReport:
    """Growth check kin(t)/2 <= 2*kin(0)/2 + C*t^2 with C = |grad V|_inf^2/4."""

    passed: bool
    constant: float
    kinetic: np.ndarray
    margins: np.ndarray


def kinetic_bound_check(trajectory: Trajectory) -> KineticBoundReport:
    """Certify the quadratic-in-time kinetic energy bound along a run."""
    if not trajectory.states:
        raise ValueError("trajectory has no snapshots")
    C = trajectory.potential.sup_force**2 / 4.0
    kin = np.array([kinetic_energy(s) / 2.0 for s in trajectory.states])
    t = np.array(trajectory.times)
    margins = 2.0 * kin[0] + C * t**2 - kin
    return KineticBoundReport(
        passed=bool(margins.min() >= -1e-10 * max(kin[0], 1.0)),
        constant=C,
        kinetic=kin,
        margins=margins,
    )


def save_trajectory(trajectory: Trajectory, directory: str | Path) -> None:
    """Checkpoint states as binary dumps plus one JSON metadata file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, state in enumerate(trajectory.states):
        save_state(state, directory / f"snapshot_{i:04d}.grid")
    meta = {
        "times": trajectory.times,
        "energies": trajectory.energies.tolist(),
        "method": trajectory.method,
        "dt": trajectory.dt,
        "N": trajectory.states[0].N,
        "hbar": trajectory.states[0].hbar,
        "potential": trajectory.potential.name,
        "energy_drift_exceeded": trajectory.energy_drift_exceeded,
    }
    write_sidecar(directory / "trajectory.json", meta)
