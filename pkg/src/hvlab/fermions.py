"""Antisymmetric N-fermion lattice states and their reduced density matrices.

Two storage backends: a dense rank-N position tensor (small N, spectrally
exact) and an occupation basis over sorted site subsets (larger N on coarse
grids).  The semiclassical scale is tied to the particle count through
hbar = N**(-1/d) and is never set independently.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityExceeded, NonOrthonormalOrbitals, OrderExceedsN
from .gridio import load_grid_array, read_sidecar, save_grid_array, write_sidecar
from .phasespace import CoherentWindow, Grid, make_grid

DENSE_MAX_N = 4
DENSE_MAX_ENTRIES = 2**24
OCCUPATION_MAX_N = 6
OCCUPATION_MAX_DIM = 13_000_000
OCCUPATION_MAX_SITES = 64  # subset bitmasks live in uint64
RDM2_MAX_SITES = 64
RDM2_MAX_WORK = 20_000_000

_ORTHO_TOL = 1e-10


def subsets_lex(n_sites: int, size: int) -> np.ndarray:
    """All sorted `size`-subsets of range(n_sites), lexicographic, as rows."""
    if size == 0:
        return np.zeros((1, 0), dtype=np.int64)
    if size > n_sites:
        return np.zeros((0, size), dtype=np.int64)
    blocks = []
    for first in range(n_sites - size + 1):
        tail = subsets_lex(n_sites - first - 1, size - 1)
        blk = np.empty((tail.shape[0], size), dtype=np.int64)
        blk[:, 0] = first
        blk[:, 1:] = tail + first + 1
        blocks.append(blk)
    return np.vstack(blocks)


def _mask_basis(n_sites: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Bitmask basis sorted by mask value, plus matching site rows."""
    combos = subsets_lex(n_sites, size)
    masks = np.zeros(combos.shape[0], dtype=np.uint64)
    for j in range(size):
        masks |= np.uint64(1) << combos[:, j].astype(np.uint64)
    order = np.argsort(masks)
    return masks[order], combos[order]


def _parity_sign(masked: np.ndarray) -> np.ndarray:
    return 1.0 - 2.0 * (np.bitwise_count(masked).astype(np.int64) & 1)


@dataclass(frozen=True)
class ManyBodyState:
    """Normalized antisymmetric N-particle state on a spatial grid."""

    grid: Grid
    N: int
    backend: str
    amplitudes: np.ndarray
    basis: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError("particle count must be positive")
        if self.backend == "dense":
            M = self.grid.M
            if self.amplitudes.shape != (M,) * self.N:
                raise ValueError("dense amplitudes must be a rank-N site tensor")
        elif self.backend == "occupation":
            if self.basis is None or self.basis.shape != self.amplitudes.shape:
                raise ValueError("occupation backend needs a matching mask basis")
        else:
            raise ValueError(f"unknown backend {self.backend!r}")

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def hbar(self) -> float:
        return float(self.N) ** (-1.0 / self.grid.d)

    def norm(self) -> float:
        if self.backend == "dense":
            return float(
                np.linalg.norm(self.amplitudes.ravel()) * self.grid.wq ** (self.N / 2)
            )
        return float(np.linalg.norm(self.amplitudes))

    def antisymmetry_defect(self) -> float:
        """Relative sup-norm defect over adjacent coordinate swaps."""
        if self.backend == "occupation" or self.N == 1:
            return 0.0
        psi = self.amplitudes
        scale = float(np.abs(psi).max()) or 1.0
        worst = 0.0
        for j in range(self.N - 1):
            flipped = np.swapaxes(psi, j, j + 1)
            worst = max(worst, float(np.abs(psi + flipped).max()) / scale)
        return worst


@dataclass(frozen=True)
class ReducedDensityMatrix:
    """Order-k correlation kernel with lattice-measure trace."""

    grid: Grid
    k: int
    kernel: np.ndarray
    trace: complex


def _require_dense_capacity(grid: Grid, N: int) -> None:
    if N > DENSE_MAX_N:
        raise CapacityExceeded(
            f"dense backend supports N <= {DENSE_MAX_N}, got N={N}"
        )
    if grid.M**N > DENSE_MAX_ENTRIES:
        raise CapacityExceeded(
            f"dense tensor would hold {grid.M**N} entries "
            f"(limit {DENSE_MAX_ENTRIES})"
        )


def _require_occupation_capacity(grid: Grid, N: int) -> int:
    if N > OCCUPATION_MAX_N:
        raise CapacityExceeded(
            f"occupation backend supports N <= {OCCUPATION_MAX_N}, got N={N}"
        )
    if grid.M > OCCUPATION_MAX_SITES:
        raise CapacityExceeded(
            f"occupation backend needs at most {OCCUPATION_MAX_SITES} sites, "
            f"grid has {grid.M}"
        )
    dim = math.comb(grid.M, N)
    if dim > OCCUPATION_MAX_DIM:
        raise CapacityExceeded(
            f"occupation basis dimension {dim} exceeds {OCCUPATION_MAX_DIM}"
        )
    return dim


def dense_state(grid: Grid, N: int, tensor: np.ndarray) -> ManyBodyState:
    """Wrap and normalize a rank-N position tensor."""
    _require_dense_capacity(grid, N)
    psi = np.asarray(tensor, dtype=complex)
    if psi.shape != (grid.M,) * N:
        raise ValueError(f"expected shape {(grid.M,) * N}, got {psi.shape}")
    nrm = np.linalg.norm(psi.ravel()) * grid.wq ** (N / 2)
    if nrm == 0.0:
        raise ValueError("zero state cannot be normalized")
    state = ManyBodyState(grid=grid, N=N, backend="dense", amplitudes=psi / nrm)
    defect = state.antisymmetry_defect()
    if defect > 1e-12:
        raise ValueError(f"tensor is not antisymmetric (defect {defect:.2e})")
    return state


def occupation_state(grid: Grid, N: int, amplitudes: np.ndarray) -> ManyBodyState:
    """Wrap and normalize coefficients over the sorted-mask subset basis."""
    dim = _require_occupation_capacity(grid, N)
    amps = np.asarray(amplitudes, dtype=complex)
    if amps.shape != (dim,):
        raise ValueError(f"expected {dim} coefficients, got shape {amps.shape}")
    nrm = np.linalg.norm(amps)
    if nrm == 0.0:
        raise ValueError("zero state cannot be normalized")
    basis, _ = _mask_basis(grid.M, N)
    return ManyBodyState(
        grid=grid, N=N, backend="occupation", amplitudes=amps / nrm, basis=basis
    )


def plane_wave_orbitals(grid: Grid, modes: Sequence[Sequence[int]]) -> np.ndarray:
    """Normalized lattice plane waves e^{ik.x}/sqrt(L^d) for integer modes."""
    sites = grid.sites()
    rows = []
    for mode in modes:
        kvec = 2.0 * np.pi / grid.L * np.atleast_1d(np.asarray(mode, dtype=float))
        rows.append(np.exp(1j * sites @ kvec) / grid.L ** (grid.d / 2))
    return np.array(rows)


def orthonormalize_orbitals(grid: Grid, raw: np.ndarray) -> np.ndarray:
    """QR-orthonormalize orbital rows in the lattice inner product."""
    q, _ = np.linalg.qr(np.asarray(raw, dtype=complex).T)
    return q.T / math.sqrt(grid.wq)


def _check_orthonormal(grid: Grid, orbitals: np.ndarray) -> None:
    gram = grid.wq * (orbitals @ orbitals.conj().T)
    defect = float(np.abs(gram - np.eye(orbitals.shape[0])).max())
    if defect > _ORTHO_TOL:
        raise NonOrthonormalOrbitals(
            f"orbital Gram matrix deviates from identity by {defect:.2e}"
        )


def _perm_sign(perm: Sequence[int]) -> int:
    inversions = sum(
        1 for a, b in itertools.combinations(range(len(perm)), 2) if perm[a] > perm[b]
    )
    return -1 if inversions & 1 else 1


def slater_determinant(
    grid: Grid, orbitals: np.ndarray, backend: str = "dense"
) -> ManyBodyState:
    """Antisymmetrized product state of orthonormal orbitals (rows)."""
    orbitals = np.asarray(orbitals, dtype=complex)
    if orbitals.ndim != 2 or orbitals.shape[1] != grid.M:
        raise ValueError("orbitals must be rows over the flattened site lattice")
    N = orbitals.shape[0]
    _check_orthonormal(grid, orbitals)

    if backend == "dense":
        _require_dense_capacity(grid, N)
        psi = np.zeros((grid.M,) * N, dtype=complex)
        for perm in itertools.permutations(range(N)):
            term = orbitals[perm[0]]
            for j in range(1, N):
                term = np.multiply.outer(term, orbitals[perm[j]])
            psi += _perm_sign(perm) * term
        psi /= math.sqrt(math.factorial(N))
        return dense_state(grid, N, psi)

    if backend == "occupation":
        dim = _require_occupation_capacity(grid, N)
        basis, combos = _mask_basis(grid.M, N)
        amps = np.empty(dim, dtype=complex)
        scale = grid.wq ** (N / 2)
        block = 1 << 16
        for lo in range(0, dim, block):
            rows = combos[lo : lo + block]
            vals = orbitals[:, rows].transpose(1, 0, 2)  # (block, orbital, site)
            amps[lo : lo + rows.shape[0]] = scale * np.linalg.det(vals)
        return ManyBodyState(
            grid=grid,
            N=N,
            backend="occupation",
            amplitudes=amps / np.linalg.norm(amps),
            basis=basis,
        )

    raise ValueError(f"unknown backend {backend!r}")


def to_occupation(state: ManyBodyState) -> ManyBodyState:
    """Convert a dense state to subset coefficients c_S = sqrt(N!) w^{N/2} psi(S)."""
    if state.backend == "occupation":
        return state
    _require_occupation_capacity(state.grid, state.N)
    basis, combos = _mask_basis(state.grid.M, state.N)
    idx = tuple(combos[:, j] for j in range(state.N))
    amps = (
        state.amplitudes[idx]
        * math.sqrt(math.factorial(state.N))
        * state.grid.wq ** (state.N / 2)
    )
    return occupation_state(state.grid, state.N, amps)


def to_dense(state: ManyBodyState) -> ManyBodyState:
    """Scatter subset coefficients back into the antisymmetric tensor."""
    if state.backend == "dense":
        return state
    _require_dense_capacity(state.grid, state.N)
    _, combos = _mask_basis(state.grid.M, state.N)
    scale = math.sqrt(math.factorial(state.N)) * state.grid.wq ** (state.N / 2)
    psi = np.zeros((state.grid.M,) * state.N, dtype=complex)
    for perm in itertools.permutations(range(state.N)):
        idx = tuple(combos[:, p] for p in perm)
        psi[idx] = _perm_sign(perm) * state.amplitudes / scale
    return dense_state(state.grid, state.N, psi)


def overlap(a: ManyBodyState, b: ManyBodyState) -> complex:
    """Inner product <a, b> in the lattice measure."""
    a.grid.require_same(b.grid)
    if a.N != b.N:
        raise ValueError("states carry different particle counts")
    if a.backend != b.backend:
        b = to_dense(b) if a.backend == "dense" else to_occupation(b)
    if a.backend == "dense":
        return complex(
            np.vdot(a.amplitudes, b.amplitudes) * a.grid.wq**a.N
        )
    return complex(np.vdot(a.amplitudes, b.amplitudes))


def _annihilation_vectors(state: ManyBodyState) -> tuple[np.ndarray, np.ndarray]:
    """Row s holds a_s |state> in the (N-1)-particle mask basis."""
    grid, N = state.grid, state.N
    basis = state.basis
    assert basis is not None
    basis_lower, _ = _mask_basis(grid.M, N - 1)
    D = np.zeros((grid.M, basis_lower.shape[0]), dtype=complex)
    for s in range(grid.M):
        bit = np.uint64(1) << np.uint64(s)
        sel = (basis & bit) != 0
        src = basis[sel]
        rows = np.searchsorted(basis_lower, src ^ bit)
        D[s, rows] = _parity_sign(src & (bit - np.uint64(1))) * state.amplitudes[sel]
    return D, basis_lower


def _pair_annihilation_vectors(
    state: ManyBodyState,
) -> tuple[np.ndarray, np.ndarray]:
    """Row (s<t) holds a_t a_s |state> in the (N-2)-particle mask basis."""
    grid, N = state.grid, state.N
    basis = state.basis
    assert basis is not None
    pairs = subsets_lex(grid.M, 2)
    basis_lower, _ = _mask_basis(grid.M, N - 2)
    work = pairs.shape[0] * max(basis_lower.shape[0], 1)
    if work > RDM2_MAX_WORK:
        raise CapacityExceeded(
            f"pair contraction needs {work} workspace entries "
            f"(limit {RDM2_MAX_WORK})"
        )
    A = np.zeros((pairs.shape[0], basis_lower.shape[0]), dtype=complex)
    one = np.uint64(1)
    for p, (s, t) in enumerate(pairs):
        bit_s = one << np.uint64(s)
        bit_t = one << np.uint64(t)
        sel = ((basis & bit_s) != 0) & ((basis & bit_t) != 0)
        src = basis[sel]
        sign = _parity_sign(src & (bit_s - one))
        sign = sign * _parity_sign((src ^ bit_s) & (bit_t - one))
        rows = np.searchsorted(basis_lower, src ^ (bit_s | bit_t))
        A[p, rows] = sign * state.amplitudes[sel]
    return A, pairs


def reduced_density(state: ManyBodyState, k: int) -> ReducedDensityMatrix:
    """Correlation kernel of order k in {1, 2}, trace N!/(N-k)!."""
    if k not in (1, 2):
        raise ValueError("only orders k=1 and k=2 are supported")
    if k > state.N:
        raise OrderExceedsN(f"order k={k} exceeds particle count N={state.N}")
    grid, N, wq = state.grid, state.N, state.grid.wq

    if k == 1:
        if state.backend == "dense":
            flat = state.amplitudes.reshape(grid.M, -1)
            kernel = N * wq ** (N - 1) * (flat @ flat.conj().T)
        else:
            D, _ = _annihilation_vectors(state)
            kernel = (D @ D.conj().T) / wq
        trace = complex(wq * np.trace(kernel))
        return ReducedDensityMatrix(grid=grid, k=1, kernel=kernel, trace=trace)

    if grid.M > RDM2_MAX_SITES:
        raise CapacityExceeded(
            f"order-2 kernel needs M <= {RDM2_MAX_SITES} sites, grid has {grid.M}"
        )
    M = grid.M
    if state.backend == "dense":
        flat = state.amplitudes.reshape(M * M, -1)
        kernel = (N * (N - 1) * wq ** (N - 2) * (flat @ flat.conj().T)).reshape(
            M, M, M, M
        )
    else:
        A, pairs = _pair_annihilation_vectors(state)
        gram = (A @ A.conj().T) / wq**2
        i1, i2 = pairs[:, 0], pairs[:, 1]
        half = np.zeros((M, M, pairs.shape[0]), dtype=complex)
        half[i1, i2, :] = gram
        half[i2, i1, :] = -gram
        kernel = np.zeros((M, M, M, M), dtype=complex)
        kernel[:, :, i1, i2] = half
        kernel[:, :, i2, i1] = -half
    trace = complex(wq**2 * np.einsum("stst->", kernel))
    return ReducedDensityMatrix(grid=grid, k=2, kernel=kernel, trace=trace)


def number_moment(state: ManyBodyState, k: int) -> float:
    """<(number operator / N)^k>; identically 1 on the fixed-N sector."""
    if k < 1:
        raise ValueError("moment order must be positive")
    nrm = state.norm()
    if abs(nrm - 1.0) > 1e-10:
        raise ValueError(f"state norm {nrm:.2e} is not 1; normalize first")
    # every basis vector is an eigenvector of the number operator with value N
    return float(nrm**2)


def kinetic_energy(state: ManyBodyState) -> float:
    """Per-particle kinetic energy hbar^2 sum_j <grad_j psi, grad_j psi> / N."""
    g = state.grid
    hbar = state.hbar
    if state.backend == "dense":
        psi = state.amplitudes.reshape((g.Mq,) * (g.d * state.N))
        total = 0.0
        for axis in range(g.d * state.N):
            ft = np.fft.fft(psi, axis=axis)
            shape = [1] * psi.ndim
            shape[axis] = g.Mq
            ft *= (1j * g.k1).reshape(shape)
            grad = np.fft.ifft(ft, axis=axis)
            total += float(np.vdot(grad, grad).real) * g.wq**state.N
        return hbar**2 * total / state.N

    kernel = reduced_density(state, 1).kernel
    resh = kernel.reshape((g.Mq,) * g.d + (g.M,))
    ft = np.fft.fftn(resh, axes=tuple(range(g.d)))
    ksq = np.zeros((g.Mq,) * g.d)
    for axis in range(g.d):
        shape = [1] * g.d
        shape[axis] = g.Mq
        ksq = ksq + (g.k1**2).reshape(shape)
    ft *= ksq[..., None]
    applied = np.fft.ifftn(ft, axes=tuple(range(g.d))).reshape(g.M, g.M)
    return hbar**2 * float(g.wq * np.trace(applied).real) / state.N


def localized_number(
    state: ManyBodyState, window: CoherentWindow, boxes: Sequence[Sequence[float]]
) -> float:
    """Position-averaged k-fold localized number observable.

    Each box contributes the analytic center integral hbar^{d/2} of its
    unit-volume indicator; the site sum runs over the diagonal of the
    order-k kernel.  The caller compares against hbar^{-dk/2}.
    """
    k = len(boxes)
    if k not in (1, 2):
        raise ValueError("supported box counts are 1 and 2")
    if k > state.N:
        raise OrderExceedsN(f"{k} boxes exceed particle count N={state.N}")
    window.grid.require_same(state.grid)
    if abs(window.hbar - state.hbar) > 1e-12 * state.hbar:
        raise ValueError(
            f"window scale {window.hbar} does not match state scale {state.hbar}"
        )
    for box in boxes:
        center = np.atleast_1d(np.asarray(box, dtype=float))
        if center.shape != (state.grid.d,):
            raise ValueError("each box center must have one entry per dimension")
    rdm = reduced_density(state, k)
    if k == 1:
        diag = float(np.trace(rdm.kernel).real) * state.grid.wq
    else:
        diag = float(np.einsum("stst->", rdm.kernel).real) * state.grid.wq**2
    return state.hbar ** (state.grid.d * k / 2) * diag


def save_state(state: ManyBodyState, path: str | Path) -> None:
    """Binary amplitude dump plus a JSON sidecar describing the sector."""
    path = Path(path)
    save_grid_array(path, state.amplitudes)
    g = state.grid
    write_sidecar(
        path.with_suffix(".json"),
        {
            "N": state.N,
            "d": g.d,
            "backend": state.backend,
            "hbar": state.hbar,
            "grid": {"d": g.d, "L": g.L, "Mq": g.Mq, "Pmax": g.Pmax, "Mp": g.Mp},
        },
    )


def load_state(path: str | Path) -> ManyBodyState:
    path = Path(path)
    meta = read_sidecar(path.with_suffix(".json"))
    grid = make_grid(**meta["grid"])
    amps = load_grid_array(path)
    if meta["backend"] == "dense":
        return dense_state(grid, meta["N"], amps)
    return occupation_state(grid, meta["N"], amps)
