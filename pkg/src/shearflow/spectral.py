"""Pseudo-spectral solver for forced incompressible 2-D Euler in a channel.

The domain is ``[0, L) x [0, 1]``, periodic in ``x1``, with free-slip walls
at ``x2 = 0`` and ``x2 = 1``.  Free-slip makes the vorticity vanish on the
walls, so the natural discretization is Fourier in ``x1`` times a sine
series in ``x2``.  Internally both are realized with one real FFT on the
grid extended to ``x2 in [0, 2)`` by odd reflection about ``x2 = 1``:
vorticity and streamfunction are odd under the mirror, velocities are
(even, odd), and pointwise products preserve those parities, so the
pseudo-spectral nonlinear term never leaves the sine subspace.

The flow is advanced in vorticity form, ``domega/dt + u . grad omega =
curl f``, with the streamfunction solve ``lap psi = -omega``.  The
vorticity pins the ``x1``-averaged velocity down only up to an additive
constant (its wall-to-wall mean), so that constant — the momentum of the
mean flow — is carried as a separate unknown.  It evolves only through
the mean component of the forcing: the nonlinearity cannot move it, since
the Reynolds stress divergence integrates to zero between the walls.

Time stepping is classical RK4 under a CFL guard, the nonlinear product
is dealiased with the 2/3 rule (so grid sums of quadratic quantities are
exactly their spectral, Parseval values), and a blow-up guard aborts
trajectories whose vorticity grows by three orders of magnitude —
smooth 2-D flow should never do that, so tripping it means the numerics
have failed, not the physics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Union

import numpy as np

from shearflow.profiles import StepProfile

#: exponent of the compactly supported polynomial mollifier (1 - s^2)^n
BUMP_EXPONENT = 8

#: default CFL number used by :func:`suggest_dt`
DEFAULT_CFL = 0.4

#: hard CFL limit enforced by :func:`step`
CFL_LIMIT = 0.5

#: blow-up guard: abort when max|omega| exceeds this multiple of the initial
BLOWUP_FACTOR = 1e3


class CFLViolationError(ValueError):
    """The requested time step breaks the advective CFL limit."""


class NumericalBlowupError(RuntimeError):
    """Vorticity grew without bound or became non-finite."""


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True, eq=False)
class ChannelGrid:
    """Uniform collocation grid and spectral multipliers for the channel.

    Physical samples live on ``x1_i = i L / n1`` and the cell centers
    ``x2_j = (j + 1/2) / n2``; the half-integer offset lets the odd mirror
    extension about the walls avoid duplicating wall points (where the
    vorticity vanishes anyway).
    """

    n1: int
    n2: int
    L: float

    def __post_init__(self):
        if self.n1 < 4 or self.n1 % 2:
            raise ValueError("n1 must be an even integer >= 4")
        if self.n2 < 4:
            raise ValueError("n2 must be >= 4")
        if not self.L > 0.0:
            raise ValueError("L must be positive")

    # -- coordinates

    @property
    def x1(self) -> np.ndarray:
        return np.arange(self.n1) * (self.L / self.n1)

    @property
    def x2(self) -> np.ndarray:
        return (np.arange(self.n2) + 0.5) / self.n2

    @property
    def cell_area(self) -> float:
        return (self.L / self.n1) * (1.0 / self.n2)

    @property
    def min_dx(self) -> float:
        return min(self.L / self.n1, 1.0 / self.n2)

    # -- spectral multipliers (extended domain [0, L) x [0, 2))

    @property
    def k1(self) -> np.ndarray:
        """Streamwise wavenumbers, shaped to broadcast over hat arrays."""
        return (2.0 * np.pi * np.fft.fftfreq(self.n1, d=self.L / self.n1))[
            :, np.newaxis
        ]

    @property
    def kappa(self) -> np.ndarray:
        """Wall-normal wavenumbers pi*n of the mirror-extended grid."""
        return (np.pi * np.arange(self.n2 + 1))[np.newaxis, :]

    @property
    def inv_k_sq(self) -> np.ndarray:
        k_sq = self.k1**2 + self.kappa**2
        k_sq[0, 0] = 1.0
        out = 1.0 / k_sq
        out[0, 0] = 0.0
        return out

    @property
    def dealias(self) -> np.ndarray:
        """2/3-rule mask: products of masked fields are alias-free."""
        m = np.abs(np.fft.fftfreq(self.n1) * self.n1)[:, np.newaxis]
        n = np.arange(self.n2 + 1)[np.newaxis, :]
        return (m <= self.n1 // 3) & (n <= (2 * self.n2) // 3)

    # -- transforms between channel fields and extended-domain coefficients

    def to_hat(self, field: np.ndarray, parity: int) -> np.ndarray:
        """rfft2 of the mirror extension of a channel field (n1, n2).

        ``parity`` is +1 for fields even about the walls (u1-like) and -1
        for odd fields (vorticity, u2, streamfunction).
        """
        ext = np.concatenate((field, parity * field[:, ::-1]), axis=1)
        return np.fft.rfft2(ext)

    def to_phys(self, hat: np.ndarray) -> np.ndarray:
        """Channel part (n1, n2) of the inverse transform."""
        return np.fft.irfft2(hat, s=(self.n1, 2 * self.n2))[:, : self.n2]


@lru_cache(maxsize=8)
def _grid_tables(n1: int, n2: int, L: float):
    """Cache the per-grid constant arrays (profiled hot in stepping)."""
    g = ChannelGrid(n1, n2, L)
    return g.k1, g.kappa, g.inv_k_sq, g.dealias


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True, eq=False)
class SpectralState:
    """Spectral vorticity plus the mean-flow constant at one instant.

    ``omega_hat`` holds the rfft2 coefficients of the mirror-extended
    vorticity, shape ``(n1, n2 + 1)``; reality of the field is structural
    (coefficients of ``-k1`` are stored as conjugates by the real FFT).
    ``mean_momentum`` is the wall-to-wall integral of the x1-averaged
    velocity — the one degree of freedom the vorticity does not see.
    ``omega_ref`` remembers the initial vorticity amplitude for the
    blow-up guard.
    """

    grid: ChannelGrid
    omega_hat: np.ndarray
    mean_momentum: float
    t: float
    omega_ref: float

    @classmethod
    def from_vorticity(
        cls,
        grid: ChannelGrid,
        omega: np.ndarray,
        mean_momentum: float = 0.0,
        t: float = 0.0,
    ) -> "SpectralState":
        """Build a state from physical channel vorticity samples."""
        omega = np.asarray(omega, dtype=float)
        if omega.shape != (grid.n1, grid.n2):
            raise ValueError("vorticity shape does not match the grid")
        hat = grid.to_hat(omega, parity=-1) * grid.dealias
        ref = float(np.max(np.abs(grid.to_phys(hat))))
        return cls(grid, hat, float(mean_momentum), float(t), max(ref, 1.0))


@dataclass(frozen=True)
class MeanFlow:
    """x1-averaged velocity profile on the cell centers, plus its integral."""

    ubar: np.ndarray
    momentum: float


def mean_flow(state: SpectralState) -> MeanFlow:
    """Reconstruct the mean profile from the k1=0 vorticity and the constant."""
    g = state.grid
    psi_row = state.omega_hat[0, :] * g.inv_k_sq[0, :]
    du_row = 1j * g.kappa[0, :] * psi_row
    ubar_ext = np.fft.irfft(du_row, 2 * g.n2) / g.n1
    ubar = ubar_ext[: g.n2] + state.mean_momentum
    return MeanFlow(ubar, state.mean_momentum)


def velocity_fields(state: SpectralState) -> tuple[np.ndarray, np.ndarray]:
    """Physical velocity components (u1, u2) on the channel grid."""
    g = state.grid
    psi_hat = state.omega_hat * g.inv_k_sq
    u1 = g.to_phys(1j * g.kappa * psi_hat) + state.mean_momentum
    u2 = g.to_phys(-1j * g.k1 * psi_hat)
    return u1, u2


def vorticity_field(state: SpectralState) -> np.ndarray:
    """Physical vorticity on the channel grid."""
    return state.grid.to_phys(state.omega_hat)


# ---------------------------------------------------------------------------
# forcing


@dataclass(frozen=True, eq=False)
class ForceField:
    """Divergence-free, wall-tangent force, stored as curl plus mean.

    ``curl_hat`` carries the spectral curl of the fluctuating (k1 != 0)
    part; its k1 = 0 row is identically zero by construction.  The
    x1-averaged streamwise component rides in ``mean_accel`` on the cell
    centers.  Together they determine the divergence-free projection of
    any input field exactly: the curl kills gradients, and gradients of
    periodic pressures cannot carry an x1-mean.
    """

    curl_hat: np.ndarray
    mean_accel: np.ndarray

    @classmethod
    def zero(cls, grid: ChannelGrid) -> "ForceField":
        return cls(
            np.zeros((grid.n1, grid.n2 + 1), dtype=complex),
            np.zeros(grid.n2),
        )

    @classmethod
    def from_physical(
        cls, grid: ChannelGrid, f1: np.ndarray, f2: np.ndarray
    ) -> "ForceField":
        """Leray-project physical force samples onto admissible fields.

        ``f1`` must be even about the walls and ``f2`` odd (tangency);
        what the curl and the mean do not retain is exactly the gradient
        part, so no explicit pressure solve is needed.
        """
        f1 = np.asarray(f1, dtype=float)
        f2 = np.asarray(f2, dtype=float)
        if f1.shape != (grid.n1, grid.n2) or f2.shape != (grid.n1, grid.n2):
            raise ValueError("force component shape does not match the grid")
        f1_hat = grid.to_hat(f1, parity=+1)
        f2_hat = grid.to_hat(f2, parity=-1)
        curl = (1j * grid.k1 * f2_hat - 1j * grid.kappa * f1_hat) * grid.dealias
        curl[0, :] = 0.0
        return cls(curl, f1.mean(axis=0))

    def l2_norm(self, grid: ChannelGrid) -> float:
        """Exact L2 norm of the represented force over the channel."""
        f1, f2 = force_fields(grid, self)
        return float(np.sqrt(grid.cell_area * np.sum(f1 * f1 + f2 * f2)))


def force_fields(grid: ChannelGrid, force: ForceField) -> tuple[np.ndarray, np.ndarray]:
    """Physical components of the divergence-free force on the channel grid."""
    phi_hat = force.curl_hat * grid.inv_k_sq
    f1 = grid.to_phys(1j * grid.kappa * phi_hat)
    f2 = grid.to_phys(-1j * grid.k1 * phi_hat)
    return f1 + force.mean_accel[np.newaxis, :], f2


def _mean_curl_row(grid: ChannelGrid, mean_accel: np.ndarray) -> np.ndarray:
    """k1 = 0 vorticity forcing, -d/dx2 of the mean acceleration."""
    ext = np.concatenate((mean_accel, mean_accel[::-1]))
    row = -1j * grid.kappa[0, :] * np.fft.rfft(ext)
    n = np.arange(grid.n2 + 1)
    return np.where(n <= (2 * grid.n2) // 3, row, 0.0) * grid.n1


# ---------------------------------------------------------------------------
# mollified profiles -> states


def _bump_coeff() -> float:
    """Normalization of (1 - s^2)^n on [-1, 1] (exact rational value)."""
    n = BUMP_EXPONENT
    integral = 2.0 * (4.0**n) * (math.factorial(n) ** 2) / math.factorial(2 * n + 1)
    return 1.0 / integral


def _bump(s: np.ndarray, order: int = 0) -> np.ndarray:
    """The mollifier kernel (order 0) or its s-derivatives, zero outside [-1, 1]."""
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    body = np.where(inside, 1.0 - s * s, 0.0)
    n = BUMP_EXPONENT
    if order == 0:
        out = body**n
    elif order == 1:
        out = n * body ** (n - 1) * (-2.0 * s)
    elif order == 2:
        out = n * (n - 1) * body ** (n - 2) * 4.0 * s * s - 2.0 * n * body ** (n - 1)
    else:
        raise ValueError("unsupported derivative order")
    return np.where(inside, _bump_coeff() * out, 0.0)


def _bump_cdf(s: np.ndarray) -> np.ndarray:
    """Integral of the mollifier from -1 to s, clipped outside the support."""
    s = np.clip(np.asarray(s, dtype=float), -1.0, 1.0)
    n = BUMP_EXPONENT
    # antiderivative of (1 - s^2)^n by binomial expansion
    acc = np.zeros_like(s)
    for j in range(n + 1):
        c = math.comb(n, j) * (-1.0) ** j / (2 * j + 1)
        acc += c * (s ** (2 * j + 1) - (-1.0) ** (2 * j + 1))
    return _bump_coeff() * acc


def _reflected_segments(p: StepProfile) -> list[tuple[float, float, float]]:
    """Segments of the profile extended evenly about both walls."""
    bp = np.asarray(p.breakpoints)
    vals = np.asarray(p.values)
    segs = [(bp[i], bp[i + 1], vals[i]) for i in range(len(vals))]
    left = [(-b, -a, v) for a, b, v in segs]
    right = [(2.0 - b, 2.0 - a, v) for a, b, v in segs]
    return left + segs + right


def mollified_profile(p: StepProfile, width: float, x: np.ndarray) -> np.ndarray:
    """The profile convolved with the compact bump, reflected at the walls.

    The even reflection preserves the wall-to-wall integral exactly and
    keeps the slope zero at the walls, which is what free-slip demands of
    a mean flow.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for a, b, v in _reflected_segments(p):
        if v == 0.0:
            continue
        out += v * (_bump_cdf((x - a) / width) - _bump_cdf((x - b) / width))
    return out


def mollified_shear(p: StepProfile, width: float, x: np.ndarray) -> np.ndarray:
    """Derivative of :func:`mollified_profile` (one bump per value jump)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for a, b, v in _reflected_segments(p):
        if v == 0.0:
            continue
        out += v * (_bump((x - a) / width) - _bump((x - b) / width)) / width
    return out


def from_profile(
    p: StepProfile, mollify_width: float, n1: int, n2: int, L: float
) -> SpectralState:
    """Parallel-flow state whose x1-average is the mollified profile.

    The vorticity is purely mean (k1 = 0): minus the derivative of the
    mollified profile, a bump of mass equal to minus the value jump at
    each interface.  Rejects widths the grid cannot see.
    """
    if not mollify_width > 0.0:
        raise ValueError("mollify_width must be positive")
    grid = ChannelGrid(n1, n2, L)
    if 2.0 * mollify_width * n2 < 4.0:
        raise ValueError(
            "grid too coarse: fewer than 4 points across the mollifier"
        )
    omega_bar = -mollified_shear(p, mollify_width, grid.x2)
    omega = np.tile(omega_bar, (n1, 1))
    from shearflow.profiles import momentum as profile_momentum

    return SpectralState.from_vorticity(
        grid, omega, mean_momentum=profile_momentum(p)
    )


# ---------------------------------------------------------------------------
# time stepping


ForceLike = Union[None, ForceField, Callable[[float], ForceField]]


def _force_at(force: ForceLike, t: float) -> Optional[ForceField]:
    if force is None or isinstance(force, ForceField):
        return force
    return force(t)


def _rhs(
    grid: ChannelGrid, omega_hat: np.ndarray, mean_m: float, force: Optional[ForceField]
) -> tuple[np.ndarray, float]:
    """Spectral tendency of (omega_hat, mean_momentum)."""
    k1, kappa, inv_k_sq, mask = _grid_tables(grid.n1, grid.n2, grid.L)
    psi_hat = omega_hat * inv_k_sq
    shape = (grid.n1, 2 * grid.n2)
    u1 = np.fft.irfft2(1j * kappa * psi_hat, s=shape) + mean_m
    u2 = np.fft.irfft2(-1j * k1 * psi_hat, s=shape)
    om_x = np.fft.irfft2(1j * k1 * omega_hat, s=shape)
    om_y = np.fft.irfft2(1j * kappa * omega_hat, s=shape)
    tendency = -np.fft.rfft2(u1 * om_x + u2 * om_y) * mask
    dmean = 0.0
    if force is not None:
        tendency += force.curl_hat
        tendency[0, :] += _mean_curl_row(grid, force.mean_accel)
        dmean = float(np.mean(force.mean_accel))
    return tendency, dmean


def step(
    state: SpectralState,
    dt: float,
    force: ForceLike = None,
    cfl_limit: float = CFL_LIMIT,
) -> SpectralState:
    """One classical RK4 step of the forced vorticity equation.

    ``force`` may be a fixed :class:`ForceField` or a callable ``t ->
    ForceField`` sampled at the RK4 stage times.  Raises
    :class:`CFLViolationError` when ``max|u| dt / min(dx)`` exceeds the
    limit and :class:`NumericalBlowupError` when the vorticity leaves the
    guard band.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    g = state.grid
    u1, u2 = velocity_fields(state)
    umax = float(np.sqrt(np.max(u1 * u1 + u2 * u2)))
    cfl = umax * dt / g.min_dx
    if cfl > cfl_limit * (1.0 + 1e-12):
        raise CFLViolationError(
            f"CFL number {cfl:.3f} exceeds the {cfl_limit} limit "
            f"(max|u|={umax:.3g}, dt={dt:.3g})"
        )

    t, w, m = state.t, state.omega_hat, state.mean_momentum
    fa = _force_at(force, t)
    fb = _force_at(force, t + 0.5 * dt)
    fc = _force_at(force, t + dt)
    kw1, km1 = _rhs(g, w, m, fa)
    kw2, km2 = _rhs(g, w + 0.5 * dt * kw1, m + 0.5 * dt * km1, fb)
    kw3, km3 = _rhs(g, w + 0.5 * dt * kw2, m + 0.5 * dt * km2, fb)
    kw4, km4 = _rhs(g, w + dt * kw3, m + dt * km3, fc)
    w_new = w + (dt / 6.0) * (kw1 + 2.0 * kw2 + 2.0 * kw3 + kw4)
    m_new = m + (dt / 6.0) * (km1 + 2.0 * km2 + 2.0 * km3 + km4)

    if not np.all(np.isfinite(w_new)) or not np.isfinite(m_new):
        raise NumericalBlowupError("non-finite coefficients after step")
    new = SpectralState(g, w_new, m_new, t + dt, state.omega_ref)
    omega_max = float(np.max(np.abs(vorticity_field(new))))
    if omega_max > BLOWUP_FACTOR * state.omega_ref:
        raise NumericalBlowupError(
            f"vorticity grew to {omega_max:.3g}, {BLOWUP_FACTOR}x past its "
            "initial scale; smooth 2-D flow cannot do that"
        )
    return new


def suggest_dt(state: SpectralState, cfl: float = DEFAULT_CFL) -> float:
    """Largest time step keeping the advective CFL number at ``cfl``."""
    u1, u2 = velocity_fields(state)
    umax = float(np.sqrt(np.max(u1 * u1 + u2 * u2)))
    return cfl * state.grid.min_dx / max(umax, 1e-12)


def advance(
    state: SpectralState, dt: float, n_steps: int, force: ForceLike = None
) -> SpectralState:
    """Apply :func:`step` ``n_steps`` times."""
    for _ in range(n_steps):
        state = step(state, dt, force)
    return state


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class DiagnosticsRecord:
    """Integral diagnostics of one state.

    ``energy`` and ``enstrophy`` are full-channel integrals (midpoint
    grid sums, which are exactly the Parseval values for dealiased
    quadratics); ``momentum`` is reported per unit channel length, i.e.
    the wall-to-wall integral of the mean profile, so it compares
    directly with the step-profile momentum.  ``vorticity_moments`` are
    the grid integrals of omega^n for n = 1..4.
    """

    energy: float
    momentum: float
    enstrophy: float
    vorticity_moments: tuple[float, float, float, float]
    linf_velocity: float


def diagnostics(state: SpectralState) -> DiagnosticsRecord:
    g = state.grid
    u1, u2 = velocity_fields(state)
    omega = vorticity_field(state)
    da = g.cell_area
    energy = 0.5 * da * float(np.sum(u1 * u1 + u2 * u2))
    momentum = float(np.mean(u1))
    moments = tuple(da * float(np.sum(omega**n)) for n in range(1, 5))
    enstrophy = 0.5 * moments[1]
    linf = float(np.sqrt(np.max(u1 * u1 + u2 * u2)))
    return DiagnosticsRecord(energy, momentum, enstrophy, moments, linf)


# ---------------------------------------------------------------------------
# admissible test fields and weak residuals


def _bump01(s: np.ndarray, order: int = 0) -> np.ndarray:
    """Unnormalized C^7 window (1 - s^2)^8 and derivatives, zero outside.

    The high exponent keeps grid quadrature of windowed integrands at the
    round-off floor: a window this smooth has spectral content decaying
    like n^-9, so midpoint sums see essentially no aliasing error.
    """
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    body = np.where(inside, 1.0 - s * s, 0.0)
    n = BUMP_EXPONENT
    if order == 0:
        out = body**n
    elif order == 1:
        out = -2.0 * n * s * body ** (n - 1)
    elif order == 2:
        out = 4.0 * n * (n - 1) * s * s * body ** (n - 2) - 2.0 * n * body ** (
            n - 1
        )
    else:
        raise ValueError("unsupported derivative order")
    return np.where(inside, out, 0.0)


def _window(lo: float, hi: float, x: np.ndarray, order: int = 0) -> np.ndarray:
    """The C^3 window mapped onto [lo, hi], with chain-rule factors."""
    c = 2.0 / (hi - lo)
    s = (np.asarray(x, dtype=float) - lo) * c - 1.0
    return _bump01(s, order) * c**order


@dataclass(frozen=True)
class BumpTestField:
    """Divergence-free space-time test field, compact in x2 and t.

    The velocity is the perpendicular gradient of ``amplitude *
    cos(2 pi m x1 / L + phase) * W(x2) * W(t)`` with C^3 polynomial
    windows W, so incompressibility and compact support are structural
    and every derivative needed by the weak form is available in closed
    form.
    """

    L: float
    m: int
    phase: float
    amplitude: float
    x2_lo: float
    x2_hi: float
    t_lo: float
    t_hi: float

    def __post_init__(self):
        if not (0.0 <= self.x2_lo < self.x2_hi <= 1.0):
            raise ValueError("x2 window must sit inside [0, 1]")
        if not self.t_lo < self.t_hi:
            raise ValueError("empty time window")

    @property
    def x2_support(self) -> tuple[float, float]:
        return (self.x2_lo, self.x2_hi)

    @property
    def t_support(self) -> tuple[float, float]:
        return (self.t_lo, self.t_hi)

    def _parts(self, x1, x2, t, dx2: int = 0, dt: int = 0):
        th = 2.0 * np.pi * self.m * x1 / self.L + self.phase
        w2 = _window(self.x2_lo, self.x2_hi, x2, dx2)
        wt = float(_window(self.t_lo, self.t_hi, np.asarray(t), dt))
        return th, w2, wt

    def velocity(self, x1, x2, t):
        th, w2, wt = self._parts(x1, x2, t)
        _, dw2, _ = self._parts(x1, x2, t, dx2=1)
        a = self.amplitude
        kx = 2.0 * np.pi * self.m / self.L
        v1 = a * np.cos(th) * dw2 * wt
        v2 = a * kx * np.sin(th) * w2 * wt
        return v1, v2

    def dt_velocity(self, x1, x2, t):
        th, w2, _ = self._parts(x1, x2, t)
        _, dw2, dwt = self._parts(x1, x2, t, dx2=1, dt=1)
        a = self.amplitude
        kx = 2.0 * np.pi * self.m / self.L
        return a * np.cos(th) * dw2 * dwt, a * kx * np.sin(th) * w2 * dwt

    def gradient(self, x1, x2, t):
        """(d1v1, d2v1, d1v2, d2v2) in closed form."""
        th, w2, wt = self._parts(x1, x2, t)
        _, dw2, _ = self._parts(x1, x2, t, dx2=1)
        _, ddw2, _ = self._parts(x1, x2, t, dx2=2)
        a = self.amplitude
        kx = 2.0 * np.pi * self.m / self.L
        d1v1 = -a * kx * np.sin(th) * dw2 * wt
        d2v1 = a * np.cos(th) * ddw2 * wt
        d1v2 = a * kx * kx * np.cos(th) * w2 * wt
        d2v2 = a * kx * np.sin(th) * dw2 * wt
        return d1v1, d2v1, d1v2, d2v2


@dataclass(frozen=True)
class BumpScalarField:
    """Scalar test function with the same window structure."""

    L: float
    m: int
    phase: float
    amplitude: float
    x2_lo: float
    x2_hi: float
    t_lo: float
    t_hi: float

    @property
    def x2_support(self) -> tuple[float, float]:
        return (self.x2_lo, self.x2_hi)

    @property
    def t_support(self) -> tuple[float, float]:
        return (self.t_lo, self.t_hi)

    def gradient(self, x1, x2, t):
        th = 2.0 * np.pi * self.m * x1 / self.L + self.phase
        w2 = _window(self.x2_lo, self.x2_hi, x2)
        dw2 = _window(self.x2_lo, self.x2_hi, x2, 1)
        wt = float(_window(self.t_lo, self.t_hi, np.asarray(t)))
        a = self.amplitude
        kx = 2.0 * np.pi * self.m / self.L
        return -a * kx * np.sin(th) * w2 * wt, a * np.cos(th) * dw2 * wt


def random_test_field(
    seed: int, L: float, t_lo: float, t_hi: float
) -> BumpTestField:
    """A reproducible admissible test field strictly inside the cylinder."""
    rng = np.random.default_rng(seed)
    lo2 = rng.uniform(0.08, 0.4)
    hi2 = rng.uniform(lo2 + 0.25, 0.92)
    span = t_hi - t_lo
    lot = t_lo + span * rng.uniform(0.1, 0.35)
    hit = t_lo + span * rng.uniform(0.65, 0.9)
    return BumpTestField(
        L=L,
        m=int(rng.integers(1, 4)),
        phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        amplitude=float(rng.uniform(0.5, 1.5)),
        x2_lo=float(lo2),
        x2_hi=float(hi2),
        t_lo=float(lot),
        t_hi=float(hit),
    )


def random_scalar_field(
    seed: int, L: float, t_lo: float, t_hi: float
) -> BumpScalarField:
    rng = np.random.default_rng(seed + 7_919)
    lo2 = rng.uniform(0.08, 0.4)
    hi2 = rng.uniform(lo2 + 0.25, 0.92)
    span = t_hi - t_lo
    lot = t_lo + span * rng.uniform(0.1, 0.35)
    hit = t_lo + span * rng.uniform(0.65, 0.9)
    return BumpScalarField(
        L=L,
        m=int(rng.integers(1, 4)),
        phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        amplitude=float(rng.uniform(0.5, 1.5)),
        x2_lo=float(lo2),
        x2_hi=float(hi2),
        t_lo=float(lot),
        t_hi=float(hit),
    )


def _check_support(field, t0: float, t1: float) -> None:
    lo2, hi2 = field.x2_support
    lot, hit = field.t_support
    if lo2 <= 0.0 or hi2 >= 1.0:
        raise ValueError("test field support touches the channel walls")
    if lot <= t0 or hit >= t1:
        raise ValueError("test field support touches the time boundary")


def _upsampled_velocity(
    state: SpectralState, factor: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Velocity on a ``factor``-times finer grid by spectral zero padding.

    Band-limited interpolation is exact, and on the finer grid the
    quadratic transport terms of the weak form are alias-free, so their
    grid sums are exact integrals of the represented fields.
    """
    g = state.grid
    n1, m2 = g.n1, g.n2 + 1
    fine1, fine2 = factor * g.n1, factor * g.n2
    psi_hat = state.omega_hat * g.inv_k_sq
    k1 = g.k1
    kappa = g.kappa

    # the coarse x2 samples sit at (j + 1/2)/n2, so the interpolant must be
    # re-phased to land on the fine cell centers (j + 1/2)/(factor n2)
    shift = 0.5 * (1.0 / (factor * g.n2) - 1.0 / g.n2)
    phase = np.exp(1j * kappa[0, :] * shift)

    def pad(hat: np.ndarray) -> np.ndarray:
        out = np.zeros((fine1, factor * g.n2 + 1), dtype=complex)
        half = n1 // 2
        out[:half, :m2] = hat[:half, :] * phase
        out[-half:, :m2] = hat[-half:, :] * phase
        return out * (factor * factor)

    shape = (fine1, 2 * factor * g.n2)
    u1 = np.fft.irfft2(pad(1j * kappa * psi_hat), s=shape)[:, : fine2]
    u2 = np.fft.irfft2(pad(-1j * k1 * psi_hat), s=shape)[:, : fine2]
    return u1 + state.mean_momentum, u2


def weak_residual(
    snapshots,
    v: BumpTestField,
    phi: BumpScalarField,
) -> tuple[float, float]:
    """Weak-form residuals of a trajectory against admissible test fields.

    For equally spaced snapshots of a solution, returns the trapezoidal
    time quadrature of the space integrals of

    * ``u . dv/dt + (u (x) u) : grad v``  (momentum residual), and
    * ``u . grad phi``                    (incompressibility residual).

    Space integrals are grid sums on a spectrally upsampled grid, which
    keeps the quadratic transport term alias-free.  Both residuals vanish
    for exact solutions of the unforced equations; a forced trajectory's
    momentum residual equals ``-integral (f, v)``.  Test supports must
    stay strictly inside the open space-time cylinder.
    """
    snapshots = list(snapshots)
    if len(snapshots) < 3:
        raise ValueError("need at least three snapshots")
    times = np.array([s.t for s in snapshots])
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-10, atol=1e-12):
        raise ValueError("snapshots must be equally spaced in time")
    _check_support(v, times[0], times[-1])
    _check_support(phi, times[0], times[-1])

    g = snapshots[0].grid
    factor = 2
    x1f = np.arange(factor * g.n1) * (g.L / (factor * g.n1))
    x2f = (np.arange(factor * g.n2) + 0.5) / (factor * g.n2)
    X1, X2 = np.meshgrid(x1f, x2f, indexing="ij")
    da = g.cell_area / (factor * factor)
    mom = np.empty(len(snapshots))
    inc = np.empty(len(snapshots))
    for i, s in enumerate(snapshots):
        u1, u2 = _upsampled_velocity(s, factor)
        dv1, dv2 = v.dt_velocity(X1, X2, s.t)
        d1v1, d2v1, d1v2, d2v2 = v.gradient(X1, X2, s.t)
        transport = (
            u1 * u1 * d1v1 + u1 * u2 * d2v1 + u2 * u1 * d1v2 + u2 * u2 * d2v2
        )
        mom[i] = da * np.sum(u1 * dv1 + u2 * dv2 + transport)
        g1, g2 = phi.gradient(X1, X2, s.t)
        inc[i] = da * np.sum(u1 * g1 + u2 * g2)
    r_mom = float(np.trapezoid(mom, times))
    r_inc = float(np.trapezoid(inc, times))
    return r_mom, r_inc


def force_inner_product(
    grid: ChannelGrid, force: ForceField, v: BumpTestField, t: float
) -> float:
    """Space integral (f, v) at one instant (for forced weak identities)."""
    X1, X2 = np.meshgrid(grid.x1, grid.x2, indexing="ij")
    f1, f2 = force_fields(grid, force)
    v1, v2 = v.velocity(X1, X2, t)
    return float(grid.cell_area * np.sum(f1 * v1 + f2 * v2))
