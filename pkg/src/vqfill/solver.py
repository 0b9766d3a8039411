"""Pseudo-spectral integrator for forced 2D vorticity on the periodic square (0, 2pi)^2.

Array layout: ``values[i, j]`` is the vorticity at ``x1 = i*dx, x2 = j*dx`` with
``dx = 2pi/N``, i.e. axis 0 runs along x1 and axis 1 along x2.

FFT convention (held fixed everywhere in the package): the forward transform is
unscaled (``numpy.fft.rfft2``) and the inverse carries the 1/N^2 factor
(``numpy.fft.irfft2``). Because the domain side is 2pi, wavenumbers are integers.

Time stepping is IMEX: Crank-Nicolson on the viscous term, Heun (explicit
trapezoidal RK2) on advection, Kolmogorov forcing and linear drag, with the 2/3
rule applied to the advection term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from vqfill.errors import ConfigError, InstabilityError

DOMAIN_SIZE = 2.0 * math.pi
GRF_ALPHA = 2.5
GRF_TAU = 7.0
GRF_VARIANCE_SCALE = GRF_TAU**1.5


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class FlowField:
    """Vorticity snapshot on an N x N periodic grid."""

    values: np.ndarray
    time: float = 0.0
    domain_size: float = DOMAIN_SIZE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ConfigError(f"flow field must be square, got shape {self.values.shape}")
        if not _is_pow2(self.values.shape[0]):
            raise ConfigError(f"grid size must be a power of two, got {self.values.shape[0]}")
        if not np.all(np.isfinite(self.values)):
            raise InstabilityError(f"non-finite vorticity at t={self.time}")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SolverParams:
    reynolds: float = 1000.0
    forcing_wavenumber: int = 4
    forcing_amplitude: float = -4.0
    drag_coefficient: float = -0.1
    dt: float = 1.0 / 1024
    dealias: bool = True

    def __post_init__(self):
        if not self.reynolds > 0:
            raise ConfigError(f"reynolds must be positive, got {self.reynolds}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")


@dataclass
class Trajectory:
    frames: list[FlowField]
    sample_interval: float
    params: SolverParams
    seed: int | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])


def grid_coordinates(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x1, x2)`` node coordinates, each shaped (n, n)."""
    x = np.arange(n) * (DOMAIN_SIZE / n)
    return np.meshgrid(x, x, indexing="ij")


def wavenumbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer wavenumbers for the rfft2 layout, broadcastable to (n, n//2+1)."""
    k1 = np.fft.fftfreq(n, d=1.0 / n)[:, None]
    k2 = np.fft.rfftfreq(n, d=1.0 / n)[None, :]
    return k1, k2


def _derivative_wavenumbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    # Odd derivatives of the Nyquist mode are not representable in a real field.
    k1, k2 = wavenumbers(n)
    k1 = np.where(np.abs(k1) == n // 2, 0.0, k1)
    k2 = np.where(k2 == n // 2, 0.0, k2)
    return k1, k2


def _check_grid_size(n: int, minimum: int = 2) -> None:
    if not isinstance(n, (int, np.integer)) or not _is_pow2(int(n)) or n < minimum:
        raise ConfigError(f"grid size must be a power of two >= {minimum}, got {n!r}")


def grf_sample(seed: int, grid_size: int) -> FlowField:
    """Draw a zero-mean Gaussian random field with covariance 7^(3/2) (-Lap + 49)^(-5/2).

    The continuum field is ``sum_k sqrt(lam_k) xi_k e^{ik.x} / (2pi)`` with
    ``lam_k = 7^(3/2) (|k|^2 + 49)^(-5/2)``, ``xi_k`` standard complex normals and
    ``e^{ik.x}/(2pi)`` the orthonormal Fourier basis of the (0, 2pi)^2 box. Under
    the unscaled-forward FFT this gives ``E|w_hat_k|^2 = N^4 lam_k / (4pi^2)``.
    The 7^(3/2) factor scales the variance, not the standard deviation.

    Hermitian symmetry comes for free by transforming real white noise. The k=0
    and Nyquist modes are zeroed.
    """
    _check_grid_size(grid_size, minimum=16)
    n = int(grid_size)
    rng = np.random.default_rng(seed)
    noise_hat = np.fft.rfft2(rng.standard_normal((n, n)))  # E|.|^2 = N^2
    k1, k2 = wavenumbers(n)
    lam = GRF_VARIANCE_SCALE * (k1**2 + k2**2 + GRF_TAU**2) ** (-GRF_ALPHA)
    w_hat = noise_hat * (n * np.sqrt(lam) / (2.0 * math.pi))
    w_hat[0, 0] = 0.0
    w_hat[n // 2, :] = 0.0
    w_hat[:, n // 2] = 0.0
    return FlowField(np.fft.irfft2(w_hat, s=(n, n)), time=0.0)


def _velocity_hat(w_hat: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    k1, k2 = wavenumbers(n)
    d1, d2 = _derivative_wavenumbers(n)
    ksq = k1**2 + k2**2
    ksq[0, 0] = 1.0
    psi_hat = w_hat / ksq
    psi_hat[0, 0] = 0.0
    return 1j * d2 * psi_hat, -1j * d1 * psi_hat


def vorticity_to_velocity(field: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Velocity (u1, u2) = (d psi/d x2, -d psi/d x1) from Lap psi = -w."""
    n = field.n
    u1_hat, u2_hat = _velocity_hat(np.fft.rfft2(field.values), n)
    return np.fft.irfft2(u1_hat, s=(n, n)), np.fft.irfft2(u2_hat, s=(n, n))


def cfl_limit(field: FlowField) -> float:
    """Largest dt allowed by CFL = 0.5 dx / max|u| (inf for a fluid at rest)."""
    u1, u2 = vorticity_to_velocity(field)
    umax = float(np.max(np.hypot(u1, u2)))
    if umax == 0.0:
        return math.inf
    return 0.5 * (field.domain_size / field.n) / umax


class SpectralSolver:
    """Precomputed operators for one grid size and parameter set."""

    def __init__(self, n: int, params: SolverParams):
        _check_grid_size(n)
        self.n = n
        self.params = params
        k1, k2 = wavenumbers(n)
        self.k1, self.k2 = _derivative_wavenumbers(n)
        ksq = k1**2 + k2**2
        half_visc = 0.5 * params.dt * (-ksq / params.reynolds)
        self.lhs = 1.0 - half_visc
        self.rhs = 1.0 + half_visc
        # 2/3 rule: keep |k_i| < N/3 in each direction.
        cutoff = n / 3.0
        self.dealias = (np.abs(k1) < cutoff) & (np.abs(k2) < cutoff)
        _, x2 = grid_coordinates(n)
        self.forcing_hat = np.fft.rfft2(params.forcing_amplitude * np.cos(params.forcing_wavenumber * x2))
        self.forcing_hat[0, 0] = 0.0

    def explicit_terms(self, w_hat: np.ndarray) -> np.ndarray:
        n = self.n
        u1_hat, u2_hat = _velocity_hat(w_hat, n)
        u1 = np.fft.irfft2(u1_hat, s=(n, n))
        u2 = np.fft.irfft2(u2_hat, s=(n, n))
        dw1 = np.fft.irfft2(1j * self.k1 * w_hat, s=(n, n))
        dw2 = np.fft.irfft2(1j * self.k2 * w_hat, s=(n, n))
        adv_hat = np.fft.rfft2(u1 * dw1 + u2 * dw2)
        if self.params.dealias:
            adv_hat *= self.dealias
        return -adv_hat + self.forcing_hat + self.params.drag_coefficient * w_hat

    def advance(self, w_hat: np.ndarray) -> np.ndarray:
        dt = self.params.dt
        f0 = self.explicit_terms(w_hat)
        base = self.rhs * w_hat
        w1 = (base + dt * f0) / self.lhs
        w1[0, 0] = 0.0
        out = (base + 0.5 * dt * (f0 + self.explicit_terms(w1))) / self.lhs
        out[0, 0] = 0.0
        return out

    def to_field(self, w_hat: np.ndarray, time: float) -> FlowField:
        values = np.fft.irfft2(w_hat, s=(self.n, self.n))
        if not np.all(np.isfinite(values)):
            finite = values[np.isfinite(values)]
            peak = float(np.max(np.abs(finite))) if finite.size else math.nan
            raise InstabilityError(
                f"solution blew up at t={time:.6g} (max finite |w|={peak:.4g}); reduce dt"
            )
        return FlowField(values, time=time)


def step(field: FlowField, params: SolverParams) -> FlowField:
    """Advance ``field`` by one ``params.dt``."""
    solver = SpectralSolver(field.n, params)
    w_hat = np.fft.rfft2(field.values)
    w_hat[0, 0] = 0.0
    return solver.to_field(solver.advance(w_hat), field.time + params.dt)


def _integer_ratio(a: float, b: float, what: str) -> int:
    ratio = a / b
    r = round(ratio)
    if abs(ratio - r) > 1e-9 * max(1.0, abs(ratio)):
        raise ConfigError(f"{what}: {a} is not an integer multiple of {b}")
    return int(r)


def simulate(
    initial: FlowField,
    duration: float,
    sample_interval: float,
    params: SolverParams,
    seed: int | None = None,
) -> Trajectory:
    """Integrate from ``initial`` and keep frames every ``sample_interval`` up to ``duration`` inclusive."""
    if duration < 0 or sample_interval <= 0:
        raise ConfigError("duration must be >= 0 and sample_interval > 0")
    steps_per_frame = _integer_ratio(sample_interval, params.dt, "sample_interval")
    n_intervals = _integer_ratio(duration, sample_interval, "duration") if duration > 0 else 0
    limit = cfl_limit(initial)
    if params.dt > limit:
        raise ConfigError(f"dt={params.dt} violates the CFL bound {limit:.4g} of the initial field")

    solver = SpectralSolver(initial.n, params)
    w_hat = np.fft.rfft2(initial.values)
    w_hat[0, 0] = 0.0
    t0 = initial.time
    frames = [replace(initial, values=initial.values.copy())]
    for i in range(1, n_intervals + 1):
        for _ in range(steps_per_frame):
            w_hat = solver.advance(w_hat)
        frames.append(solver.to_field(w_hat, t0 + i * sample_interval))
    return Trajectory(frames=frames, sample_interval=sample_interval, params=params, seed=seed)
