"""Uniform time grids, causal time mollification, time derivatives and Hölder seminorms."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import spectral as sp


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    count: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.count < 2:
            raise ValueError("a time grid needs at least 2 samples")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.count)

    @property
    def span(self) -> float:
        return self.dt * (self.count - 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.span

    def index(self, t: float) -> int:
        return int(round((t - self.t0) / self.dt))

    @classmethod
    def covering(cls, T: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        n = int(np.ceil(T / dt - 1e-9))
        return cls(t0, float(dt), n + 1)


class SpaceTimeField:
    """Time-sampled fields; coeffs has shape (count, N, N//2+1).

    `source` and `mollifier` are set when the field was produced by `mollify`,
    which enables the exact derivative of the mollified field.
    """

    def __init__(self, grid: TimeGrid, coeffs: np.ndarray, source=None, mollifier=None):
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.ndim != 3 or coeffs.shape[0] != grid.count:
            raise ValueError("coefficient stack does not match the time grid")
        self.grid = grid
        self.coeffs = coeffs
        self.source = source
        self.mollifier = mollifier

    @property
    def N(self) -> int:
        return self.coeffs.shape[1]

    @property
    def frames(self) -> list:
        return [sp.TorusField(coeffs=c) for c in self.coeffs]

    def frame(self, i: int) -> sp.TorusField:
        return sp.TorusField(coeffs=self.coeffs[i])

    def values(self) -> np.ndarray:
        return sp.inverse(self.coeffs)

    @classmethod
    def from_frames(cls, grid: TimeGrid, frames) -> "SpaceTimeField":
        return cls(grid, np.stack([f.coeffs for f in frames]))

    @classmethod
    def from_function(cls, grid: TimeGrid, func, N: int) -> "SpaceTimeField":
        """func(t, X1, X2) -> physical values."""
        x = sp.TWO_PI * np.arange(N) / N
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        vals = np.stack([func(t, X1, X2) for t in grid.times])
        return cls(grid, sp.forward(vals))

    def map_coeffs(self, fn) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, fn(self.coeffs))

    def resized(self, M: int) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, sp.resize(self.coeffs, M))


# ---------------------------------------------------------------------------
# mollifier


def _profile_raw(s):
    s = np.asarray(s, dtype=float)
    u = s / 2.0
    out = np.zeros_like(s)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


def _profile_raw_deriv(s):
    s = np.asarray(s, dtype=float)
    u = s / 2.0
    out = np.zeros_like(s)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    # d/ds exp(-1/(1-u^2)) with u = s/2
    out[inside] = np.exp(-1.0 / (1.0 - ui**2)) * (-2.0 * ui / (1.0 - ui**2) ** 2) * 0.5
    return out


@functools.lru_cache(maxsize=1)
def _profile_mass() -> float:
    val, _ = integrate.quad(lambda s: float(_profile_raw(np.array([s]))[0]), -2.0, 2.0,
                            epsabs=1e-14, epsrel=1e-14, limit=200)
    return val


def profile(s) -> np.ndarray:
    """Smooth even bump on [-2, 2] with unit integral."""
    return _profile_raw(s) / _profile_mass()


def profile_deriv(s) -> np.ndarray:
    return _profile_raw_deriv(s) / _profile_mass()


@dataclass(frozen=True)
class Mollifier:
    """Causal kernel psi_eps(tau) = eps^-1 profile(tau/eps - 2), supported in [0, 4 eps]."""

    eps: float

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("mollifier scale must be positive")

    def kernel(self, tau) -> np.ndarray:
        return profile(np.asarray(tau, dtype=float) / self.eps - 2.0) / self.eps

    def kernel_deriv(self, tau) -> np.ndarray:
        return profile_deriv(np.asarray(tau, dtype=float) / self.eps - 2.0) / self.eps**2

    def _check(self, dt: float):
        if self.eps < 2.0 * dt:
            raise ValueError("mollifier under-resolved")

    def weights(self, dt: float) -> np.ndarray:
        """Quadrature weights on lags 0, dt, 2 dt, ...; normalized to unit sum."""
        self._check(dt)
        M = int(np.floor(4.0 * self.eps / dt + 1e-9))
        w = self.kernel(dt * np.arange(M + 1)) * dt
        return w / w.sum()

    def deriv_weights(self, dt: float) -> np.ndarray:
        """Weights for d/dt of the mollified signal (kernel derivative quadrature)."""
        self._check(dt)
        M = int(np.floor(4.0 * self.eps / dt + 1e-9))
        lags = dt * np.arange(M + 1)
        d = self.kernel_deriv(lags) * dt
        # impose the moment identities of the continuous kernel derivative:
        # sum d = 0 and -sum lag * d = 1, so linear signals are differentiated exactly
        d = d - d.mean()
        return d / (-(lags * d).sum())


def causal_filter(arr: np.ndarray, w: np.ndarray) -> np.ndarray:
    """out[i] = sum_m w[m] arr[i - m] along axis 0, constant extension before index 0.

    Summation order is fixed (m ascending), so out[i] never reads arr[j] for j > i.
    """
    arr = np.asarray(arr)
    T = arr.shape[0]
    out = np.zeros(arr.shape, dtype=np.result_type(arr, w))
    for m, wm in enumerate(w):
        if wm == 0.0:
            continue
        if m < T:
            out[m:] += wm * arr[: T - m]
            out[:m] += wm * arr[0]
        else:
            out += wm * arr[0]
    return out


def mollify(f, m: Mollifier, dt: float | None = None):
    """Causal time convolution of a SpaceTimeField or of an array (time on axis 0)."""
    if isinstance(f, SpaceTimeField):
        w = m.weights(f.grid.dt)
        return SpaceTimeField(f.grid, causal_filter(f.coeffs, w), source=f, mollifier=m)
    if dt is None:
        raise ValueError("dt is required for raw arrays")
    return causal_filter(np.asarray(f), m.weights(dt))


# ---------------------------------------------------------------------------
# time derivatives

FD4_BACKWARD = np.array([25.0, -48.0, 36.0, -16.0, 3.0]) / 12.0


def fd4(arr: np.ndarray, dt: float) -> np.ndarray:
    """Fourth-order backward difference along axis 0 (constant extension at the start)."""
    arr = np.asarray(arr)
    if arr.shape[0] < 5:
        raise ValueError("fd4 needs at least 5 time samples")
    return causal_filter(arr, FD4_BACKWARD) / dt


def time_derivative(f, scheme="fd4", dt: float | None = None):
    """Time derivative of a SpaceTimeField (or array with dt).

    scheme: "fd4" or "mollifier_exact"; the latter needs a field produced by mollify.
    """
    if isinstance(f, SpaceTimeField):
        if scheme == "fd4":
            return SpaceTimeField(f.grid, fd4(f.coeffs, f.grid.dt))
        if scheme == "mollifier_exact":
            if f.source is None or f.mollifier is None:
                raise ValueError("mollifier_exact applies only to mollified fields")
            w = f.mollifier.deriv_weights(f.grid.dt)
            return SpaceTimeField(f.grid, causal_filter(f.source.coeffs, w))
        raise ValueError(f"unknown scheme {scheme!r}")
    if dt is None:
        raise ValueError("dt is required for raw arrays")
    if scheme != "fd4":
        raise ValueError("raw arrays support fd4 only")
    return fd4(f, dt)


# ---------------------------------------------------------------------------
# Hölder seminorm in time


def pair_schedule(n: int) -> list:
    """Index pairs (i, i+h) for dyadic h < n, plus the full span, start stride max(1, h//2)."""
    seps = []
    h = 1
    while h < n:
        seps.append(h)
        h *= 2
    if n >= 1 and (not seps or seps[-1] != n):
        seps.append(n)
    pairs = []
    for h in seps:
        stride = max(1, h // 2)
        starts = np.arange(0, n - h + 1, stride)
        if starts[-1] != n - h:
            starts = np.append(starts, n - h)
        pairs.extend((int(i), int(i + h)) for i in starts)
    return pairs


_BLOCK_BUDGET = 2**26  # grid points of cached block fields


def _besov_kind(which):
    if isinstance(which, sp.HolderLP):
        if float(which.s).is_integer():
            raise ValueError("integer Hölder order unsupported")
        return which.s, np.inf, np.inf
    if isinstance(which, sp.Besov):
        return which.s, which.p, which.q
    return None


def time_holder_seminorm(f, alpha: float, window=None, spatial_norm=None, grid: TimeGrid | None = None,
                         oversample: int = sp.DEFAULT_OVERSAMPLE, chunk: int = 64) -> float:
    """max over sampled pairs of ||f(s) - f(s')||_E / |s - s'|^alpha within the window.

    f: SpaceTimeField, or array (time on axis 0) together with `grid`.
    spatial_norm: a norm kind from `spectral` (fields), or None for scalar series.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if isinstance(f, SpaceTimeField):
        tg, data = f.grid, f.coeffs
    else:
        if grid is None:
            raise ValueError("grid is required for raw arrays")
        tg, data = grid, np.asarray(f)
    if window is None:
        window = (tg.t0, tg.t_end)
    a, b = window
    if a < tg.t0 - 1e-9 or b > tg.t_end + 1e-9:
        raise ValueError("window longer than span")
    i0, i1 = tg.index(a), tg.index(b)
    n = i1 - i0
    if n < 1:
        return 0.0
    pairs = np.array(pair_schedule(n)) + i0
    best = 0.0
    besov = _besov_kind(spatial_norm)
    if besov is not None and (n + 1) * data.shape[-2] ** 2 * oversample**2 <= _BLOCK_BUDGET:
        # block fields are linear in the data: difference them in physical space
        blocks = sp.lp_block_values(data[i0 : i1 + 1], oversample)
        s, p, q = besov
        for start in range(0, len(pairs), chunk):
            blk = pairs[start : start + chunk] - i0
            diff = [(j, v[blk[:, 1]] - v[blk[:, 0]]) for j, v in blocks]
            vals = sp.besov_from_blocks(diff, s, p, q)
            sep = (blk[:, 1] - blk[:, 0]) * tg.dt
            best = max(best, float(np.max(vals / sep**alpha)))
        return best
    for start in range(0, len(pairs), chunk):
        blk = pairs[start : start + chunk]
        diff = data[blk[:, 1]] - data[blk[:, 0]]
        if spatial_norm is None:
            vals = np.abs(diff).reshape(len(blk), -1).max(axis=1)
        else:
            vals = sp.norm_coeffs(diff, spatial_norm, oversample)
        sep = (blk[:, 1] - blk[:, 0]) * tg.dt
        best = max(best, float(np.max(vals / sep**alpha)))
    return best
