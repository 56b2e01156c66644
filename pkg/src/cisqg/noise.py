"""Stochastic convolutions driven by Wiener, fractional Brownian and fourth-moment noise.

z is expanded in the real trigonometric basis cos(k.x)/(pi sqrt 2), sin(k.x)/(pi sqrt 2)
over half-plane representatives k with 0 < |k| <= K.  Each basis function carries an
independent scalar driver; the coefficient (k, cos) obeys

    dz = -nu |k|^gamma z dt + |k|^(delta - 1) d beta.

Random streams are keyed by (seed, sample, k1, k2), so a mode's path does not depend
on K, on the grid size or on how samples are scheduled.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import sewing
from . import spectral as sp
from .timeline import SpaceTimeField, TimeGrid, time_holder_seminorm

BASIS_SCALE = np.pi * np.sqrt(2.0)  # coefficient of cos(k.x)/(pi sqrt 2) at +k
_KEY_OFFSET = 2**31


class NoiseError(ValueError):
    pass


@dataclass
class NoiseConfig:
    kind: str = "wiener"
    delta: float = -2.2
    gamma: float = 1.0
    nu: float = 1.0
    K: int | None = None
    seed: int = 0
    hurst: float = 0.5
    upsilon: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in ("wiener", "fbm", "fourth_moment"):
            raise NoiseError(f"unknown noise kind {self.kind!r}")
        if not 0.0 < self.gamma < 1.5:
            raise NoiseError("gamma must lie in (0, 3/2)")
        if self.nu < 0:
            raise NoiseError("nu must be nonnegative")
        if self.kind == "fbm" and not 0.0 < self.hurst < 1.0:
            raise NoiseError("Hurst index must lie in (0, 1)")
        if self.kind == "fourth_moment" and self.upsilon != 1.0:
            raise NoiseError("only υ=1 driver implemented")

    def cutoff(self, N: int) -> int:
        return int(self.K) if self.K is not None else N // 3

    def regularity_ok(self, kappa: float = 0.6, sigma: float | None = None) -> bool:
        """Smoothing condition on delta for the target spatial regularity."""
        d, g = self.delta, self.gamma
        if self.kind == "wiener":
            return d < min(-1.0 - kappa + g / 2.0, -1.0)
        if self.kind == "fbm":
            return d < -2.0 - (max(g, kappa) + g * (1.0 - self.hurst))
        s = 1.0 + kappa if sigma is None else sigma
        return 4 * (d - 1) + 4 * s + (1 + self.upsilon) * g < -2

    def check(self, kappa: float = 0.6, strict: bool = False, sigma: float | None = None):
        if not self.regularity_ok(kappa, sigma):
            msg = f"delta={self.delta} too large for {self.kind} noise at kappa={kappa}"
            if strict:
                raise NoiseError(msg)
            warnings.warn(msg, stacklevel=2)

    def to_json(self) -> dict:
        return asdict(self)


def mode_table(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Half-plane representatives (k2 > 0, or k2 = 0 and k1 > 0) with 0 < |k| <= K."""
    r = np.arange(-K, K + 1)
    k1, k2 = np.meshgrid(r, r, indexing="ij")
    k1, k2 = k1.ravel(), k2.ravel()
    keep = ((k2 > 0) | ((k2 == 0) & (k1 > 0))) & (k1 * k1 + k2 * k2 <= K * K)
    return k1[keep], k2[keep]


def mode_rng(seed: int, sample: int, k1: int, k2: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(sample), int(k1) + _KEY_OFFSET, int(k2) + _KEY_OFFSET])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class NoisePath:
    """Mode coefficients z^c, z^s of shape (T, M) on the given modes."""

    config: NoiseConfig
    grid: TimeGrid
    N: int
    k1: np.ndarray
    k2: np.ndarray
    zc: np.ndarray
    zs: np.ndarray
    sample: int = 0
    drivers: np.ndarray | None = None  # (T, M, 2) cumulative driver values, if kept

    @property
    def kabs(self) -> np.ndarray:
        return np.hypot(self.k1, self.k2)

    def mode_coeffs(self, i=slice(None)) -> np.ndarray:
        """Fourier coefficients z_hat(k) at the representative modes."""
        return BASIS_SCALE * (self.zc[i] + 1j * self.zs[i])

    def coeffs(self, N: int | None = None, lam: float | None = None, frames=slice(None)) -> np.ndarray:
        """Half-layout coefficient stack on an N grid, optionally truncated by P_{<= lam}."""
        N = self.N if N is None else int(N)
        vals = self.mode_coeffs(frames)
        k1, k2 = self.k1, self.k2
        keep = (np.abs(k1) < N // 2) & (k2 < N // 2)
        if lam is not None:
            w = sp.bump(np.hypot(k1, k2) / float(lam))
            keep &= w > 0
            vals = vals * w
        vals, k1, k2 = vals[..., keep], k1[keep], k2[keep]
        lead = vals.shape[:-1]
        out = np.zeros(lead + (N, N // 2 + 1), dtype=complex)
        out[..., k1 % N, k2] = vals
        axis = k2 == 0
        out[..., (-k1[axis]) % N, 0] = np.conj(vals[..., axis])
        return out

    def field(self, N: int | None = None, lam: float | None = None) -> SpaceTimeField:
        return SpaceTimeField(self.grid, self.coeffs(N, lam))

    @property
    def z(self) -> SpaceTimeField:
        return self.field()

    def truncated(self, lam: float) -> "NoisePath":
        """Drop the modes that P_{<= lam} annihilates and weight the rest by the cutoff."""
        w = sp.bump(self.kabs / float(lam))
        keep = w > 0
        return NoisePath(self.config, self.grid, self.N, self.k1[keep], self.k2[keep],
                         self.zc[:, keep] * w[keep], self.zs[:, keep] * w[keep], self.sample)

    def scaled(self, factor: float) -> "NoisePath":
        return NoisePath(self.config, self.grid, self.N, self.k1, self.k2, self.zc * factor,
                         self.zs * factor, self.sample)

    def perturbed_after(self, t_star: float, rng: np.random.Generator, size: float = 1.0) -> "NoisePath":
        """Copy with independent noise added to every frame strictly after t_star."""
        zc, zs = self.zc.copy(), self.zs.copy()
        late = self.grid.times > t_star
        zc[late] += size * rng.standard_normal(zc[late].shape)
        zs[late] += size * rng.standard_normal(zs[late].shape)
        return NoisePath(self.config, self.grid, self.N, self.k1, self.k2, zc, zs, self.sample)


# ---------------------------------------------------------------------------
# per-mode drivers


def _rates(cfg: NoiseConfig, kabs: np.ndarray) -> np.ndarray:
    return cfg.nu * kabs**cfg.gamma


def ou_step_std(rate: np.ndarray, dt: float) -> np.ndarray:
    """Standard deviation of the exact OU innovation over dt (unit forcing)."""
    rate = np.asarray(rate, dtype=float)
    out = np.full(rate.shape, np.sqrt(dt))
    pos = rate > 0
    out[pos] = np.sqrt(-np.expm1(-2.0 * rate[pos] * dt) / (2.0 * rate[pos]))
    return out


def ou_variance(rate, t: float) -> np.ndarray:
    """Variance of int_0^t exp(-rate (t - r)) d beta_r for Brownian beta."""
    rate = np.asarray(rate, dtype=float)
    out = np.full(rate.shape, float(t))
    pos = rate > 0
    out[pos] = -np.expm1(-2.0 * rate[pos] * t) / (2.0 * rate[pos])
    return out


def fgn_eigenvalues(n: int, hurst: float, dt: float) -> np.ndarray:
    """Eigenvalues of the circulant embedding of n fractional Gaussian noise increments."""
    k = np.arange(n + 1, dtype=float)
    h2 = 2.0 * hurst
    cov = 0.5 * (np.abs(k + 1) ** h2 - 2 * k**h2 + np.abs(k - 1) ** h2) * dt**h2
    row = np.concatenate([cov, cov[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-10 * lam.max():
        raise NoiseError("sampler covariance not positive-definite")
    return np.clip(lam, 0.0, None)


def fgn_pair(rng: np.random.Generator, eig: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent exact fGn samples of length n from one circulant draw."""
    m = eig.shape[0]
    w = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    x = np.fft.fft(np.sqrt(eig / m) * w)
    return x[:n].real.copy(), x[:n].imag.copy()


def fbm_path(rng: np.random.Generator, n: int, hurst: float, dt: float) -> np.ndarray:
    """fBm sampled at 0, dt, ..., n dt (starts at 0)."""
    inc, _ = fgn_pair(rng, fgn_eigenvalues(n, hurst, dt), n)
    return np.concatenate([[0.0], np.cumsum(inc)])


def _mode_increments(cfg: NoiseConfig, grid: TimeGrid, k1, k2, sample: int) -> np.ndarray:
    """Driver increments, shape (T-1, M, 2)."""
    n = grid.count - 1
    dt = grid.dt
    out = np.empty((n, len(k1), 2))
    eig = fgn_eigenvalues(n, cfg.hurst, dt) if cfg.kind == "fbm" else None
    for m, (a, b) in enumerate(zip(k1, k2)):
        rng = mode_rng(cfg.seed, sample, a, b)
        if cfg.kind == "wiener":
            out[:, m, :] = rng.standard_normal((n, 2))
        elif cfg.kind == "fbm":
            out[:, m, 0], out[:, m, 1] = fgn_pair(rng, eig, n)
        else:
            out[:, m, :] = np.where(rng.integers(0, 2, size=(n, 2)) == 1, 1.0, -1.0) * np.sqrt(dt)
    return out


def _assemble(cfg, grid, N, k1, k2, coeff, sample, incs, keep_drivers) -> NoisePath:
    T = grid.count
    zc = np.zeros((T, len(k1)))
    zs = np.zeros((T, len(k1)))
    zc[1:], zs[1:] = coeff[..., 0], coeff[..., 1]
    drivers = None
    if keep_drivers:
        drivers = np.concatenate([np.zeros((1,) + incs.shape[1:]), np.cumsum(incs, axis=0)])
    return NoisePath(cfg, grid, N, k1, k2, zc, zs, sample, drivers)


def gen_wiener_convolution(cfg: NoiseConfig, grid: TimeGrid, N: int, sample: int = 0,
                           keep_drivers: bool = False) -> NoisePath:
    """Exact Ornstein-Uhlenbeck update per mode; exact in law at the grid times."""
    if cfg.kind != "wiener":
        raise NoiseError("config kind is not wiener")
    k1, k2 = mode_table(cfg.cutoff(N))
    kabs = np.hypot(k1, k2)
    rate = _rates(cfg, kabs)
    eta = _mode_increments(cfg, grid, k1, k2, sample)
    decay = np.exp(-rate * grid.dt)[:, None]
    std = (ou_step_std(rate, grid.dt) * kabs ** (cfg.delta - 1.0) * cfg.amplitude)[:, None]
    z = np.empty_like(eta)
    acc = np.zeros(eta.shape[1:])
    for i in range(eta.shape[0]):
        acc = decay * acc + std * eta[i]
        z[i] = acc
    incs = eta * np.sqrt(grid.dt)
    return _assemble(cfg, grid, N, k1, k2, z, sample, incs, keep_drivers)


def gen_fbm_convolution(cfg: NoiseConfig, grid: TimeGrid, N: int, sample: int = 0,
                        keep_drivers: bool = False) -> NoisePath:
    """Per-mode fBm drivers (circulant embedding) convolved by sewing."""
    if cfg.kind != "fbm":
        raise NoiseError("config kind is not fbm")
    k1, k2 = mode_table(cfg.cutoff(N))
    kabs = np.hypot(k1, k2)
    rate = _rates(cfg, kabs)
    incs = _mode_increments(cfg, grid, k1, k2, sample)
    conv = sewing.young_convolution_path(incs, rate[:, None], grid.dt)[1:]
    z = conv * (kabs ** (cfg.delta - 1.0) * cfg.amplitude)[:, None]
    return _assemble(cfg, grid, N, k1, k2, z, sample, incs, keep_drivers)


def riemann_convolution_path(increments: np.ndarray, rate, dt: float) -> np.ndarray:
    """Midpoint Riemann sums of int_0^t exp(-rate (t - r)) d beta_r at every grid time."""
    rate = np.asarray(rate, dtype=float)
    decay = np.exp(-rate * dt)
    half = np.exp(-rate * dt / 2.0)
    out = np.zeros((increments.shape[0] + 1,) + increments.shape[1:])
    acc = np.zeros(increments.shape[1:])
    for i in range(increments.shape[0]):
        acc = decay * acc + half * increments[i]
        out[i + 1] = acc
    return out


def gen_fourth_moment_convolution(cfg: NoiseConfig, grid: TimeGrid, N: int, sample: int = 0,
                                  keep_drivers: bool = False) -> NoisePath:
    """Rademacher walk drivers (+-sqrt(dt) steps) with Riemann-sum convolution."""
    if cfg.kind != "fourth_moment":
        raise NoiseError("config kind is not fourth_moment")
    k1, k2 = mode_table(cfg.cutoff(N))
    kabs = np.hypot(k1, k2)
    rate = _rates(cfg, kabs)
    incs = _mode_increments(cfg, grid, k1, k2, sample)
    conv = riemann_convolution_path(incs, rate[:, None], grid.dt)[1:]
    z = conv * (kabs ** (cfg.delta - 1.0) * cfg.amplitude)[:, None]
    return _assemble(cfg, grid, N, k1, k2, z, sample, incs, keep_drivers)


GENERATORS = {
    "wiener": gen_wiener_convolution,
    "fbm": gen_fbm_convolution,
    "fourth_moment": gen_fourth_moment_convolution,
}


def generate(cfg: NoiseConfig, grid: TimeGrid, N: int, sample: int = 0, keep_drivers: bool = False) -> NoisePath:
    return GENERATORS[cfg.kind](cfg, grid, N, sample, keep_drivers)


def ensemble(cfg: NoiseConfig, grid: TimeGrid, N: int, samples: int, workers: int | None = None) -> list:
    """Independent paths for samples 0..samples-1; output independent of `workers`."""
    workers = sp.fft_workers() if workers is None else workers
    if workers <= 1:
        return [generate(cfg, grid, N, s) for s in range(samples)]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(lambda s: generate(cfg, grid, N, s), range(samples)))


def zero_path(cfg: NoiseConfig, grid: TimeGrid, N: int) -> NoisePath:
    k1, k2 = mode_table(cfg.cutoff(N))
    z = np.zeros((grid.count, len(k1)))
    return NoisePath(cfg, grid, N, k1, k2, z, z.copy())


# ---------------------------------------------------------------------------
# scalar stochastic integrals (fourth-moment class)


def rademacher_integrals(weights: np.ndarray, dt: float, paths: int, rng: np.random.Generator,
                         chunk: int = 2048) -> np.ndarray:
    """Samples of sum_i w_i d beta_i with Rademacher steps +-sqrt(dt)."""
    weights = np.asarray(weights, dtype=float)
    out = np.empty(paths)
    for s in range(0, paths, chunk):
        m = min(chunk, paths - s)
        eps = np.where(rng.integers(0, 2, size=(m, weights.size)) == 1, 1.0, -1.0)
        out[s : s + m] = eps @ weights * np.sqrt(dt)
    return out


def fourth_moment_rhs(weights: np.ndarray, dt: float, upsilon: float = 1.0) -> float:
    """6 (int f^2)^2 + ||f||_inf^(4 - 2(1+upsilon)) (int f^2)^(1+upsilon) on the sample grid."""
    l2 = float(np.sum(weights**2) * dt)
    sup = float(np.max(np.abs(weights)))
    return 6.0 * l2**2 + sup ** (4.0 - 2.0 * (1.0 + upsilon)) * l2 ** (1.0 + upsilon)


# ---------------------------------------------------------------------------
# moment constant


@dataclass
class MomentSpec:
    m: int = 1
    alpha: float = 0.3
    kappa: float = 0.6
    eps_plus: float = 0.05
    samples: int = 64
    bootstrap: int = 400
    seed: int = 0
    oversample: int = 1  # sup-norm oversampling inside the Besov blocks

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not self.kappa > 0.5:
            raise ValueError("kappa must exceed 1/2")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass
class CzEstimate:
    value: float
    space_term: float
    time_term: float
    ci: tuple
    per_path: np.ndarray = field(repr=False, default=None)


def unit_windows(grid: TimeGrid) -> list:
    if grid.span < 1.0 - 1e-9:
        raise ValueError("window shorter than 1 time unit")
    starts = np.arange(grid.t0, grid.t_end - 1.0 + 1e-9, 0.5)
    return [(float(s), float(s) + 1.0) for s in starts]


def path_norms(path: NoisePath, spec: MomentSpec, N_eval: int | None = None) -> np.ndarray:
    """Per unit window: sup_t ||z(t)||_{C^(1+kappa)} and [z]_{C^alpha C^(1+eps_plus)}; shape (2, windows)."""
    K = int(np.max(np.abs(np.concatenate([path.k1, path.k2])))) if len(path.k1) else 1
    if N_eval is None:
        N_eval = sp.fast_even_size(2 * K + 2)
    f = path.field(N_eval)
    space_t = sp.norm_coeffs(f.coeffs, sp.HolderLP(1.0 + spec.kappa), spec.oversample)
    tg = path.grid
    out = []
    for w in unit_windows(tg):
        i0, i1 = tg.index(w[0]), tg.index(w[1])
        out.append((float(np.max(space_t[i0 : i1 + 1])),
                    time_holder_seminorm(f, spec.alpha, w, sp.HolderLP(1.0 + spec.eps_plus),
                                         oversample=spec.oversample)))
    return np.array(out).T


def _moment(x: np.ndarray, p: float) -> np.ndarray:
    # L^p moment over the sample axis (axis 0)
    return np.mean(x**p, axis=0) ** (1.0 / p)


def _local_norm(rows: np.ndarray, p: float) -> np.ndarray:
    """rows (samples, 2, windows) -> (2,): moment per window, then the sup over windows."""
    return _moment(rows, p).max(axis=-1)


def estimate_Cz(paths, spec: MomentSpec, N_eval: int | None = None) -> CzEstimate:
    """Monte-Carlo L^{2m} moments of the space and time terms, with a bootstrap 95% CI.

    The moment is taken window by window and the supremum over unit windows afterwards.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("empty ensemble")
    rows = np.stack([path_norms(p, spec, N_eval) for p in paths])
    p = 2 * spec.m
    a, b = _local_norm(rows, p)
    rng = np.random.default_rng(spec.seed)
    boots = np.empty(spec.bootstrap)
    for i in range(spec.bootstrap):
        idx = rng.integers(0, len(rows), len(rows))
        boots[i] = _local_norm(rows[idx], p).sum()
    ci = (float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5)))
    return CzEstimate(float(a + b), float(a), float(b), ci, rows)
