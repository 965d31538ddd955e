"""Phase-space grids, coherent-state windows, and hbar-weighted Fourier transforms.

Conventions used repo-wide:

* Position fields live on a periodic lattice with ``M = Mq**d`` sites,
  flattened to shape ``(M,)``; ``Grid.sites()`` gives the coordinates.
* The lattice inner product is ``<a, b> = sum(conj(a) * b) * dq**d`` and all
  norms below are taken in that measure.
* A coherent state with parameters (q, p) is
  ``hbar**(-d/4) * f((y - q)/sqrt(hbar)) * exp(i p.y / hbar)`` where the
  envelope ``f`` is real with unit L2 norm.  Momenta on the lattice
  ``hbar * (2*pi/L) * n`` are exactly periodic; other momenta carry a seam at
  the domain boundary and are handled with minimal-image displacements.

All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import GridMismatch, UnresolvedWindow

__all__ = [
    "Grid",
    "CoherentWindow",
    "Potential",
    "make_grid",
    "make_window",
    "coherent_state",
    "resolution_defect",
    "hbar_fourier",
    "make_potential",
    "potential_from_samples",
]


def _is_pow2(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Periodic phase-space discretization.

    Parameters
    ----------
    d : spatial dimension (1 or 2).
    L : position period per dimension.
    Mq : position points per dimension (power of two).
    Pmax : momentum cutoff; the momentum grid covers [-Pmax, Pmax).
    Mp : momentum points per dimension (power of two).
    """

    d: int
    L: float
    Mq: int
    Pmax: float
    Mp: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"d must be 1 or 2, got {self.d}")
        if self.L <= 0 or self.Pmax <= 0:
            raise ValueError("L and Pmax must be positive")
        if not _is_pow2(self.Mq):
            raise ValueError(f"Mq must be a power of two >= 2, got {self.Mq}")
        if not _is_pow2(self.Mp):
            raise ValueError(f"Mp must be a power of two >= 2, got {self.Mp}")

    @property
    def dq(self) -> float:
        return self.L / self.Mq

    @property
    def dp(self) -> float:
        return 2.0 * self.Pmax / self.Mp

    @property
    def M(self) -> int:
        """Total number of position sites, Mq**d."""
        return self.Mq**self.d

    @property
    def wq(self) -> float:
        """Position quadrature weight dq**d."""
        return self.dq**self.d

    @property
    def q1(self) -> np.ndarray:
        """One-dimensional position axis, shape (Mq,)."""
        return self.dq * np.arange(self.Mq)

    @property
    def p1(self) -> np.ndarray:
        """One-dimensional momentum axis of the main grid, shape (Mp,)."""
        return -self.Pmax + self.dp * np.arange(self.Mp)

    @property
    def k1(self) -> np.ndarray:
        """FFT wavenumbers 2*pi*fftfreq, shape (Mq,)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.Mq, d=self.dq)

    def sites(self) -> np.ndarray:
        """Coordinates of all position sites, shape (M, d)."""
        axes = [self.q1] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def momenta(self) -> np.ndarray:
        """All momentum grid points, shape (Mp**d, d)."""
        axes = [self.p1] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def kvecs(self) -> np.ndarray:
        """All FFT wavevectors, shape (M, d)."""
        axes = [self.k1] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def min_image(self, x: np.ndarray) -> np.ndarray:
        """Wrap displacements into [-L/2, L/2)."""
        return (np.asarray(x) + 0.5 * self.L) % self.L - 0.5 * self.L

    def norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(np.sum(np.abs(v) ** 2) * self.wq))

    def require_same(self, other: "Grid", what: str = "operands") -> None:
        if self != other:
            raise GridMismatch(f"{what} live on different grids: {self} vs {other}")


def make_grid(d: int = 1, L: float = 2 * np.pi, Mq: int = 64,
              Pmax: float = 6.0, Mp: int = 64) -> Grid:
    """Convenience constructor with the repo-wide defaults."""
    return Grid(d=d, L=float(L), Mq=int(Mq), Pmax=float(Pmax), Mp=int(Mp))


# ---------------------------------------------------------------------------
# window envelopes


def _gauss_profile(x: np.ndarray, d: int) -> np.ndarray:
    # unit L2 norm on R^d; truncated at |x| = 8 (mass ~ erfc(8), recorded)
    r2 = np.sum(x * x, axis=-1)
    out = np.pi ** (-d / 4.0) * np.exp(-0.5 * r2)
    return np.where(r2 <= 64.0, out, 0.0)


def _gauss_profile_grad(x: np.ndarray, d: int) -> np.ndarray:
    f = _gauss_profile(x, d)
    return -x * f[..., None]


_BUMP_NORM: dict[int, float] = {}


def _bump_norm(d: int) -> float:
    # normalize exp(-1/(1-|x|^2)) on the unit ball by fine quadrature
    if d not in _BUMP_NORM:
        t = np.linspace(-1.0, 1.0, 200001)[1:-1]
        g2 = np.exp(-2.0 / (1.0 - t * t))
        if d == 1:
            val = np.trapezoid(g2, t)
        else:
            r = np.linspace(0.0, 1.0, 200001)[1:-1]
            val = np.trapezoid(2 * np.pi * r * np.exp(-2.0 / (1.0 - r * r)), r)
        _BUMP_NORM[d] = 1.0 / math.sqrt(val)
    return _BUMP_NORM[d]


def _bump_profile(x: np.ndarray, d: int) -> np.ndarray:
    r2 = np.sum(x * x, axis=-1)
    inside = r2 < 1.0
    with np.errstate(divide="ignore", over="ignore"):
        vals = np.where(inside, np.exp(-1.0 / np.where(inside, 1.0 - r2, 1.0)), 0.0)
    return _bump_norm(d) * vals


def _bump_profile_grad(x: np.ndarray, d: int) -> np.ndarray:
    r2 = np.sum(x * x, axis=-1)
    inside = r2 < 1.0
    one = np.where(inside, 1.0 - r2, 1.0)
    f = _bump_profile(x, d)
    # d/dx_a exp(-1/(1-r^2)) = f * (-2 x_a / (1-r^2)^2)
    fac = np.where(inside, -2.0 / (one * one), 0.0)
    return x * (f * fac)[..., None]


_PROFILES: dict[str, tuple[Callable, Callable, float]] = {
    "gaussian": (_gauss_profile, _gauss_profile_grad, 8.0),
    "bump": (_bump_profile, _bump_profile_grad, 1.0),
}


@dataclass(frozen=True)
class CoherentWindow:
    """Coherent-state envelope bound to a grid and a value of hbar.

    ``envelope`` holds the periodized samples of
    ``hbar**(-d/4) f(y/sqrt(hbar))`` at q=0, rescaled so the lattice norm is
    exactly one; the same rescale factor applies to every translate, so all
    coherent states built from this window are unit vectors on the grid.
    """

    kind: str
    hbar: float
    grid: Grid
    support_radius: float
    envelope: np.ndarray = field(repr=False)
    norm_rescale: float
    truncated_mass: float

    def _raw_envelope_at(self, q: np.ndarray) -> np.ndarray:
        g = self.grid
        prof = _PROFILES[self.kind][0]
        rh = math.sqrt(self.hbar)
        n_img = 1 + int(math.ceil(self.support_radius * rh / g.L))
        y = g.sites()  # (M, d)
        out = np.zeros(g.M)
        shift_range = range(-n_img, n_img + 1)
        if g.d == 1:
            shifts = [(s,) for s in shift_range]
        else:
            shifts = [(s1, s2) for s1 in shift_range for s2 in shift_range]
        for sh in shifts:
            x = (y - q[None, :] + g.L * np.asarray(sh)[None, :]) / rh
            out += prof(x, g.d)
        return self.hbar ** (-g.d / 4.0) * out

    def envelope_at(self, q) -> np.ndarray:
        """Normalized real envelope centered at q, shape (M,)."""
        q = np.atleast_1d(np.asarray(q, dtype=float))
        return self._raw_envelope_at(q) / self.norm_rescale

    def envelope_grad_at(self, q) -> np.ndarray:
        """Gradient with respect to q of :meth:`envelope_at`, shape (M, d)."""
        q = np.atleast_1d(np.asarray(q, dtype=float))
        g = self.grid
        gradf = _PROFILES[self.kind][1]
        rh = math.sqrt(self.hbar)
        n_img = 1 + int(math.ceil(self.support_radius * rh / g.L))
        y = g.sites()
        out = np.zeros((g.M, g.d))
        shift_range = range(-n_img, n_img + 1)
        if g.d == 1:
            shifts = [(s,) for s in shift_range]
        else:
            shifts = [(s1, s2) for s1 in shift_range for s2 in shift_range]
        for sh in shifts:
            x = (y - q[None, :] + g.L * np.asarray(sh)[None, :]) / rh
            out += gradf(x, g.d)
        # d/dq f((y-q)/rh) = -(1/rh) (grad f)(x)
        pref = self.hbar ** (-g.d / 4.0) / rh
        return -pref * out / self.norm_rescale


def make_window(kind: str, hbar: float, grid: Grid) -> CoherentWindow:
    """Build a coherent-state window on ``grid``.

    Raises
    ------
    UnresolvedWindow
        if sqrt(hbar) < 4*dq, i.e. the lattice cannot resolve the envelope.
    """
    if kind not in _PROFILES:
        raise ValueError(f"unknown window kind {kind!r}; choose from {sorted(_PROFILES)}")
    if hbar <= 0:
        raise ValueError("hbar must be positive")
    if math.sqrt(hbar) < 4.0 * grid.dq:
        raise UnresolvedWindow(
            f"sqrt(hbar)={math.sqrt(hbar):.3g} < 4*dq={4 * grid.dq:.3g}: "
            "window narrower than the grid resolves"
        )
    support = _PROFILES[kind][2]
    if kind == "gaussian":
        # mass beyond the 8-sigma truncation of f^2 (d-dim radial bound)
        truncated = float(math.erfc(8.0))
    else:
        truncated = 0.0
    w = CoherentWindow(
        kind=kind,
        hbar=float(hbar),
        grid=grid,
        support_radius=support,
        envelope=np.zeros(grid.M),
        norm_rescale=1.0,
        truncated_mass=truncated,
    )
    raw = w._raw_envelope_at(np.zeros(grid.d))
    rescale = float(np.sqrt(np.sum(raw * raw) * grid.wq))
    env = raw / rescale
    object.__setattr__(w, "envelope", env)
    object.__setattr__(w, "norm_rescale", rescale)
    return w


def _image_shifts(window: CoherentWindow) -> list[tuple[int, ...]]:
    g = window.grid
    rh = math.sqrt(window.hbar)
    n_img = 1 + int(math.ceil(window.support_radius * rh / g.L))
    rng = range(-n_img, n_img + 1)
    if g.d == 1:
        return [(s,) for s in rng]
    return [(s1, s2) for s1 in rng for s2 in rng]


def coherent_state(window: CoherentWindow, q, p) -> np.ndarray:
    """Sample the coherent state f^hbar_{q,p} on the position lattice.

    The torus state is the periodization of the line coherent state: every
    periodic image of the envelope carries the phase of its own absolute
    position, exp(i p.(y + m L)/hbar).  For momenta on the lattice
    hbar*(2 pi/L)*Z all image phases coincide and this reduces to
    (periodized envelope) * exp(i p.y/hbar).  Returns a complex field of
    shape (M,) with unit lattice norm.
    """
    g = window.grid
    q = np.atleast_1d(np.asarray(q, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if q.shape != (g.d,) or p.shape != (g.d,):
        raise ValueError(f"q and p must have shape ({g.d},)")
    prof = _PROFILES[window.kind][0]
    rh = math.sqrt(window.hbar)
    y = g.sites()
    acc = np.zeros(g.M, dtype=complex)
    for sh in _image_shifts(window):
        shift = g.L * np.asarray(sh, dtype=float)
        x = (y - q[None, :] + shift[None, :]) / rh
        acc += prof(x, g.d) * np.exp(1j * (p @ shift) / window.hbar)
    out = acc * np.exp(1j * (y @ p) / window.hbar)
    # canonical rescale is exact for lattice momenta; off-lattice momenta pick
    # up tiny image cross terms, so enforce the unit-norm contract directly
    return out / g.norm(out)


def resolution_defect(window: CoherentWindow, grid: Grid,
                      test_vectors: Iterable[np.ndarray]) -> float:
    """Max L2 defect of the discretized coherent-state resolution of identity.

    For each test vector v computes
    ``(2*pi*hbar)**(-d) * sum_{q,p} <f_qp, v> f_qp dq dp - v`` with q over the
    position lattice and p over the grid's momentum points, and returns the
    worst lattice-norm defect.  Test vectors are normalized first.
    """
    window.grid.require_same(grid, "window and grid")
    g = grid
    hbar = window.hbar
    vs = [np.asarray(v, dtype=complex).ravel() for v in test_vectors]
    if not vs:
        raise ValueError("need at least one test vector")

    # Per-image envelope tables over the position lattice.  The coherent state
    # is a phased sum over periodic images (see coherent_state):
    # f_qp(y) = sum_m E_m[q,y] e^{ip.(y+mL)/hbar} with E_m built from the
    # *absolute* displacement y-q so image phases attach to the right image.
    prof = _PROFILES[window.kind][0]
    rh = math.sqrt(hbar)
    pref_env = hbar ** (-g.d / 4.0) / window.norm_rescale
    y = g.sites()  # (M, d)
    shifts = _image_shifts(window)
    E_m, phase_m = [], []
    mom = g.momenta()  # (Mp^d, d)
    disp = y[None, :, :] - y[:, None, :]  # (q, y, d), absolute in (-L, L)
    for sh in shifts:
        shift = g.L * np.asarray(sh, dtype=float)
        Em = pref_env * prof((disp + shift[None, None, :]) / rh, g.d)
        if not np.any(Em):
            continue
        E_m.append(Em)
        phase_m.append(np.exp(1j * (mom @ shift) / hbar))  # (Mp^d,)

    P = np.exp(1j * (mom @ y.T) / hbar)  # (Mp^d, M)
    pref = (2 * np.pi * hbar) ** (-g.d) * g.wq * g.dp**g.d

    worst = 0.0
    for v in vs:
        v = v / g.norm(v)
        # T[q,p] = <f_qp, v> = sum_m conj(phase_m[p]) * ((E_m v~) P*)[q,p]
        T = np.zeros((g.M, mom.shape[0]), dtype=complex)
        for Em, ph in zip(E_m, phase_m):
            T += ((Em * v[None, :]) @ np.conj(P).T) * np.conj(ph)[None, :]
        T *= g.wq
        w = np.zeros(g.M, dtype=complex)
        for Em, ph in zip(E_m, phase_m):
            w += np.einsum("um,mu->u", Em.T @ (T * ph[None, :]), P)
        worst = max(worst, g.norm(pref * w - v))
    return worst


def hbar_fourier(fld: np.ndarray, grid: Grid, hbar: float,
                 inverse: bool = False) -> np.ndarray:
    """hbar-weighted Fourier transform on the position lattice.

    Forward: ``(2*pi*hbar)**(-d/2) * integral f(x) exp(-i p x / hbar) dx``
    evaluated at the momenta ``p = hbar * k`` with k the FFT wavenumbers;
    unitary between the lattice measure dq**d and the momentum measure
    ``(2*pi*hbar/L)**d``.  ``inverse=True`` composes to the identity.
    """
    shape = (grid.Mq,) * grid.d
    arr = np.asarray(fld, dtype=complex).reshape(shape)
    c = grid.wq * (2 * np.pi * hbar) ** (-grid.d / 2.0)
    if not inverse:
        out = np.fft.fftn(arr) * c
    else:
        out = np.fft.ifftn(arr / c)
    return out.reshape(np.asarray(fld).shape)


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class Potential:
    """Even periodic interaction potential with spectral evaluation.

    ``values``/``force`` are samples of V and -- for d=1 -- V' on the position
    lattice; ``modes`` holds the Fourier coefficients c_k with
    V(x) = sum_k c_k exp(i k.x), used to evaluate V and grad V at arbitrary
    points (exact for the band-limited named families).
    """

    grid: Grid
    name: str
    values: np.ndarray = field(repr=False)
    force: np.ndarray = field(repr=False)
    sup_v: float
    sup_force: float
    lipschitz_force: float

    def __post_init__(self):
        g = self.grid
        rev = (-np.indices((g.Mq,) * g.d).reshape(g.d, g.M)) % g.Mq
        flat_rev = np.ravel_multi_index(tuple(rev), (g.Mq,) * g.d)
        if not np.allclose(self.values, self.values[flat_rev], atol=1e-12, rtol=0):
            raise ValueError("potential must be even: V(-x) = V(x) on the grid")

    def _mode_table(self):
        g = self.grid
        coeff = np.fft.fftn(self.values.reshape((g.Mq,) * g.d)) / g.M
        kv = g.kvecs()
        keep = np.abs(coeff.ravel()) > 1e-14 * max(1.0, self.sup_v)
        return coeff.ravel()[keep], kv[keep]

    def v_at(self, x: np.ndarray) -> np.ndarray:
        """V evaluated at arbitrary points, shape (...,) for x of shape (..., d)."""
        c, kv = self._mode_table()
        x = np.asarray(x, dtype=float)
        ph = np.exp(1j * (x @ kv.T))
        return np.real(ph @ c)

    def force_at(self, x: np.ndarray) -> np.ndarray:
        """grad V at arbitrary points, shape (..., d)."""
        c, kv = self._mode_table()
        x = np.asarray(x, dtype=float)
        ph = np.exp(1j * (x @ kv.T))
        return np.real(ph @ (1j * kv * c[:, None]))


def potential_from_samples(grid: Grid, values: np.ndarray, name: str = "custom") -> Potential:
    """Build a Potential from lattice samples of V (must be even)."""
    values = np.asarray(values, dtype=float).ravel()
    if values.shape != (grid.M,):
        raise GridMismatch(f"potential samples have shape {values.shape}, grid wants ({grid.M},)")
    coeff = np.fft.fftn(values.reshape((grid.Mq,) * grid.d)) / grid.M
    kv = grid.kvecs()
    ck = coeff.ravel()
    # spectral force samples and sup/Lipschitz proxies (sum bounds are valid
    # Lipschitz constants and tight for the few-mode named families)
    ph = np.exp(1j * (grid.sites() @ kv.T))
    force = np.real(ph @ (1j * kv * ck[:, None]))
    if grid.d == 1:
        force = force.ravel()
    sup_v = float(np.max(np.abs(values)))
    sup_force = float(np.sum(np.linalg.norm(kv, axis=1) * np.abs(ck)))
    lips = float(np.sum(np.sum(kv * kv, axis=1) * np.abs(ck)))
    return Potential(
        grid=grid, name=name, values=values, force=force,
        sup_v=sup_v, sup_force=sup_force, lipschitz_force=lips,
    )


def make_potential(grid: Grid, family: str, amplitude: float = 1.0) -> Potential:
    """Named interaction families: ``zero``, ``cosine``, ``double-mode``.

    cosine:      V(x) = A * cos(2*pi*x/L)            (per dimension, summed)
    double-mode: V(x) = A * (cos(2*pi*x/L) + cos(4*pi*x/L)/2)
    """
    sites = grid.sites()
    base = 2 * np.pi / grid.L
    if family == "zero":
        vals = np.zeros(grid.M)
    elif family == "cosine":
        vals = amplitude * np.sum(np.cos(base * sites), axis=1)
    elif family == "double-mode":
        vals = amplitude * np.sum(
            np.cos(base * sites) + 0.5 * np.cos(2 * base * sites), axis=1
        )
    else:
        raise ValueError(f"unknown potential family {family!r}")
    return potential_from_samples(grid, vals, name=family)
