"""Fourier representation of real fields on the 2-torus and multiplier operators.

Coefficients follow  f_hat(k) = integral over [0, 2pi)^2 of exp(i x.k) f(x) dx,
so that  f(x) = (2 pi)^-2 sum_k f_hat(k) exp(-i x.k).  Under this convention the
partial derivative d_j has symbol -i k_j.

Coefficient arrays use the real-FFT half layout: shape (N, N//2 + 1), axis 0 is
k1 in numpy FFT order, axis 1 is k2 = 0..N/2.  Physical arrays are indexed
values[i, j] = f(2 pi i / N, 2 pi j / N).
"""
from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi
DEFAULT_OVERSAMPLE = 2


def fft_workers() -> int:
    """Thread cap for FFTs, read from CISQG_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("CISQG_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# grids and raw transforms


class SpectralGrid:
    """Wavenumber tables for an N x N grid in half layout."""

    def __init__(self, N: int):
        if N < 4 or N % 2:
            raise ValueError("grid size must be an even integer >= 4")
        self.N = int(N)
        self.k1 = (np.fft.fftfreq(N) * N)[:, None]
        self.k2 = (np.fft.rfftfreq(N) * N)[None, :]
        self.ksq = self.k1**2 + self.k2**2
        self.kabs = np.sqrt(self.ksq)
        self.shape = (N, N // 2 + 1)
        # multiplicity of each stored coefficient in the full spectrum
        w = np.full((1, N // 2 + 1), 2.0)
        w[0, 0] = 1.0
        w[0, -1] = 1.0
        self.weight = w

    @property
    def kmax(self) -> float:
        return float(self.kabs.max())


@functools.lru_cache(maxsize=32)
def grid(N: int) -> SpectralGrid:
    return SpectralGrid(N)


def fast_even_size(n: int, lo: int = 16) -> int:
    """Smallest even FFT-friendly size >= max(n, lo)."""
    n = max(lo, int(n))
    while True:
        n = sfft.next_fast_len(n, real=True)
        if n % 2 == 0:
            return n
        n += 1


def is_pow2(N: int) -> bool:
    return N >= 1 and (N & (N - 1)) == 0


def forward(values: np.ndarray) -> np.ndarray:
    """Physical values (..., N, N) -> coefficients (..., N, N//2+1)."""
    N = values.shape[-1]
    c = sfft.rfft2(values, axes=(-2, -1), workers=fft_workers())
    np.conjugate(c, out=c)
    c *= (TWO_PI / N) ** 2
    return c


def resize(coeffs: np.ndarray, M: int) -> np.ndarray:
    """Zero-pad or truncate half-layout coefficients to grid size M.

    Padding splits the k1 Nyquist row so that the result interpolates the same
    trigonometric polynomial; truncation drops every mode with |k_i| >= M/2.
    """
    N = coeffs.shape[-2]
    if M == N:
        return coeffs.copy()
    lead = coeffs.shape[:-2]
    out = np.zeros(lead + (M, M // 2 + 1), dtype=complex)
    if M > N:
        h = N // 2
        c = coeffs.copy()
        c[..., :, h] *= 0.5
        out[..., :h, : h + 1] = c[..., :h, :]
        out[..., M - h + 1 :, : h + 1] = c[..., h + 1 :, :]
        out[..., h, : h + 1] = 0.5 * c[..., h, :]
        out[..., M - h, : h + 1] = 0.5 * c[..., h, :]
    else:
        h = M // 2
        out[..., :h, :h] = coeffs[..., :h, :h]
        out[..., M - h + 1 :, :h] = coeffs[..., N - h + 1 :, :h]
    return out


def inverse(coeffs: np.ndarray, size: int | None = None) -> np.ndarray:
    """Coefficients -> physical values, optionally on a finer grid `size`."""
    N = coeffs.shape[-2]
    M = N if size is None else int(size)
    c = coeffs if M == N else resize(coeffs, M)
    v = sfft.irfft2(np.conjugate(c), s=(M, M), axes=(-2, -1), workers=fft_workers())
    v *= (M / TWO_PI) ** 2
    return v


def dealiased_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Coefficients of the pointwise product, alias-free on the input grid.

    Uses the 3/2 padding rule: products are formed on a grid of size 3N/2 and
    the result is truncated back to N with the Nyquist modes removed.
    """
    N = a.shape[-2]
    M = 3 * N // 2
    M += M % 2
    pa = inverse(a, M)
    pb = inverse(b, M)
    return resize(forward(pa * pb), N)


def dealiased_products(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    """Several products sharing the same padded grid (fields are reused by identity)."""
    if not pairs:
        return []
    N = pairs[0][0].shape[-2]
    M = 3 * N // 2
    M += M % 2
    cache: dict[int, np.ndarray] = {}

    def phys(c):
        key = id(c)
        if key not in cache:
            cache[key] = inverse(c, M)
        return cache[key]

    return [resize(forward(phys(a) * phys(b)), N) for a, b in pairs]


def trim_nyquist(coeffs: np.ndarray) -> np.ndarray:
    """Zero the k1 = -N/2 row and k2 = N/2 column."""
    N = coeffs.shape[-2]
    out = coeffs.copy()
    out[..., N // 2, :] = 0.0
    out[..., :, -1] = 0.0
    return out


# ---------------------------------------------------------------------------
# cutoff profile and Littlewood-Paley partition


def bump(r) -> np.ndarray:
    """Radial cutoff: 1 on r <= 1/2, 0 on r >= 1, exp(1 - 1/(1 - (2r-1)^2)) between."""
    r = np.asarray(r, dtype=float)
    s = 2.0 * r - 1.0
    out = np.where(r <= 0.5, 1.0, 0.0)
    mid = (r > 0.5) & (r < 1.0)
    if np.any(mid):
        sm = s[mid] if s.ndim else s
        val = np.exp(1.0 - 1.0 / (1.0 - sm * sm))
        if out.ndim:
            out[mid] = val
        else:
            out = val
    return out


def lp_levels(N: int) -> int:
    """Number J of shell blocks; blocks are -1, 0, ..., J-1."""
    kmax = grid(N).kmax
    J = 0
    while 2.0**J < kmax:
        J += 1
    return J


def lp_symbols(N: int) -> list[np.ndarray]:
    """Telescoping dyadic partition of unity built from `bump`."""
    g = grid(N)
    J = lp_levels(N)
    prev = bump(g.kabs / 2.0)
    out = [prev]
    for j in range(J):
        nxt = bump(g.kabs / 2.0 ** (j + 2)) if j < J - 1 else np.ones(g.shape)
        out.append(nxt - prev)
        prev = nxt
    return out


# ---------------------------------------------------------------------------
# multipliers


def _safe_inverse(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    nz = x != 0
    out[nz] = 1.0 / x[nz]
    return out


@dataclass(frozen=True)
class MultiplierSymbol:
    """A Fourier multiplier.

    kind: lambda_pow (param s), riesz (j), riesz_odd (j), perp_grad (j), grad (j),
    inv_laplace, or custom (table: callable (k1, k2) -> array or array of grid shape).
    Homogeneous kinds vanish at k = 0.
    """

    kind: str
    s: float = 0.0
    j: int = 1
    table: object = field(default=None, compare=False)

    def values(self, N: int) -> np.ndarray:
        return _symbol_table(self, N)


def lambda_pow(s: float) -> MultiplierSymbol:
    return MultiplierSymbol("lambda_pow", s=float(s))


def riesz(j: int) -> MultiplierSymbol:
    return MultiplierSymbol("riesz", j=j)


def riesz_odd(j: int) -> MultiplierSymbol:
    return MultiplierSymbol("riesz_odd", j=j)


def perp_grad(j: int) -> MultiplierSymbol:
    return MultiplierSymbol("perp_grad", j=j)


def grad(j: int) -> MultiplierSymbol:
    return MultiplierSymbol("grad", j=j)


def inv_laplace() -> MultiplierSymbol:
    return MultiplierSymbol("inv_laplace")


def custom(table) -> MultiplierSymbol:
    return MultiplierSymbol("custom", table=table)


def riesz_odd_symbol(j: int, k1, k2) -> np.ndarray:
    """Symbols of the two odd Riesz-type transforms, 0 at k = 0."""
    k1 = np.asarray(k1, dtype=float)
    k2 = np.asarray(k2, dtype=float)
    ksq = k1 * k1 + k2 * k2
    inv = _safe_inverse(np.asarray(ksq, dtype=float))
    diff = k2 * k2 - k1 * k1
    if j == 1:
        return 25.0 * diff * inv / 12.0
    if j == 2:
        return (7.0 * diff / 12.0 + 4.0 * k1 * k2) * inv
    raise ValueError("odd Riesz index must be 1 or 2")


def symbol_at(m: MultiplierSymbol, k1, k2) -> np.ndarray:
    """Evaluate a symbol at arbitrary integer frequencies."""
    k1 = np.asarray(k1, dtype=float)
    k2 = np.asarray(k2, dtype=float)
    ksq = k1 * k1 + k2 * k2
    kabs = np.sqrt(ksq)
    kind = m.kind
    if kind == "lambda_pow":
        out = np.where(kabs > 0, np.power(np.where(kabs > 0, kabs, 1.0), m.s), 0.0)
        return out.astype(float)
    if kind == "riesz":
        kj = k1 if m.j == 1 else k2
        return -1j * kj * _safe_inverse(kabs)
    if kind == "riesz_odd":
        return riesz_odd_symbol(m.j, k1, k2)
    if kind == "perp_grad":
        # grad-perp = (-d2, d1) and d_j has symbol -i k_j
        return 1j * k2 + 0 * k1 if m.j == 1 else -1j * k1 + 0 * k2
    if kind == "grad":
        return -1j * k1 + 0 * k2 if m.j == 1 else -1j * k2 + 0 * k1
    if kind == "inv_laplace":
        return -_safe_inverse(ksq)
    if kind == "custom":
        if callable(m.table):
            return np.asarray(m.table(k1, k2))
        raise ValueError("custom symbol needs a callable for off-grid evaluation")
    raise ValueError(f"unknown multiplier kind {kind!r}")


@functools.lru_cache(maxsize=64)
def _cached_symbol(kind: str, s: float, j: int, N: int) -> np.ndarray:
    g = grid(N)
    arr = symbol_at(MultiplierSymbol(kind, s=s, j=j), g.k1, g.k2)
    arr = np.broadcast_to(arr, g.shape).copy()
    arr.setflags(write=False)
    return arr


def _symbol_table(m: MultiplierSymbol, N: int) -> np.ndarray:
    if m.kind == "custom":
        g = grid(N)
        if callable(m.table):
            return np.broadcast_to(np.asarray(m.table(g.k1, g.k2)), g.shape)
        arr = np.asarray(m.table)
        if arr.shape != g.shape:
            raise ValueError("custom symbol table has the wrong shape")
        return arr
    return _cached_symbol(m.kind, m.s, m.j, N)


# ---------------------------------------------------------------------------
# fields


class TorusField:
    """Real scalar field on the N x N grid of the 2-torus.

    Immutable.  Either representation may be supplied; the other is computed on
    demand.  Values supplied at construction are kept verbatim so that binary
    round trips are bit-exact.
    """

    __slots__ = ("N", "_coeffs", "_values")

    def __init__(self, coeffs: np.ndarray | None = None, values: np.ndarray | None = None):
        if coeffs is None and values is None:
            raise ValueError("need coefficients or values")
        if values is not None:
            values = np.array(values, dtype=float)
            if values.ndim != 2 or values.shape[0] != values.shape[1]:
                raise ValueError("values must be a square 2-d array")
            values.setflags(write=False)
            N = values.shape[0]
        if coeffs is not None:
            coeffs = np.array(coeffs, dtype=complex)
            N = coeffs.shape[0]
            if coeffs.shape != (N, N // 2 + 1):
                raise ValueError("coefficients must have half layout (N, N//2+1)")
            coeffs.setflags(write=False)
        self.N = N
        self._coeffs = coeffs
        self._values = values

    # constructors
    @classmethod
    def from_values(cls, values) -> "TorusField":
        return cls(values=values)

    @classmethod
    def from_coeffs(cls, coeffs) -> "TorusField":
        return cls(coeffs=coeffs)

    @classmethod
    def zeros(cls, N: int) -> "TorusField":
        return cls(coeffs=np.zeros(grid(N).shape, dtype=complex))

    @classmethod
    def from_function(cls, func, N: int) -> "TorusField":
        x = TWO_PI * np.arange(N) / N
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        return cls(values=func(X1, X2))

    @classmethod
    def from_modes(cls, N: int, modes: dict) -> "TorusField":
        """Field with prescribed coefficients; Hermitian partners are filled in."""
        c = np.zeros(grid(N).shape, dtype=complex)
        for (a, b), val in modes.items():
            if b > 0:
                c[a % N, b] += val
            elif b < 0:
                c[(-a) % N, -b] += np.conj(val)
            else:
                c[a % N, 0] += val
                c[(-a) % N, 0] += np.conj(val)
        return cls(coeffs=c)

    # representations
    @property
    def coeffs(self) -> np.ndarray:
        if self._coeffs is None:
            c = forward(self._values)
            c.setflags(write=False)
            self._coeffs = c
        return self._coeffs

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            v = inverse(self._coeffs)
            v.setflags(write=False)
            self._values = v
        return self._values

    def coeff(self, k1: int, k2: int) -> complex:
        """Coefficient at any frequency in {-N/2..N/2-1}^2."""
        N = self.N
        if k2 < 0:
            return complex(np.conj(self.coeffs[(-k1) % N, -k2]))
        return complex(self.coeffs[k1 % N, k2])

    def full_coeffs(self) -> np.ndarray:
        """Full N x N coefficient array in numpy FFT order."""
        N = self.N
        full = np.empty((N, N), dtype=complex)
        full[:, : N // 2 + 1] = self.coeffs
        idx1 = (-np.arange(N)) % N
        for q in range(N // 2 + 1, N):
            full[:, q] = np.conj(self.coeffs[idx1, N - q])
        return full

    @property
    def mean(self) -> float:
        return float(self.coeffs[0, 0].real) / TWO_PI**2

    @property
    def mean_free(self) -> bool:
        return self.coeffs[0, 0] == 0

    def remove_mean(self) -> "TorusField":
        c = self.coeffs.copy()
        c[0, 0] = 0.0
        return TorusField(coeffs=c)

    def resized(self, M: int) -> "TorusField":
        return TorusField(coeffs=resize(self.coeffs, M))

    # arithmetic
    def _check(self, other):
        if not isinstance(other, TorusField) or other.N != self.N:
            raise ValueError("fields must share the grid size")

    def __add__(self, other):
        self._check(other)
        return TorusField(coeffs=self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return TorusField(coeffs=self.coeffs - other.coeffs)

    def __neg__(self):
        return TorusField(coeffs=-self.coeffs)

    def __mul__(self, scalar):
        if isinstance(scalar, TorusField):
            self._check(scalar)
            return TorusField(coeffs=dealiased_product(self.coeffs, scalar.coeffs))
        return TorusField(coeffs=self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __repr__(self):
        return f"TorusField(N={self.N})"


def _hermitize(c: np.ndarray) -> np.ndarray:
    """Enforce Hermitian symmetry on the self-conjugate columns k2 = 0, N/2."""
    N = c.shape[0]
    idx = (-np.arange(N)) % N
    for col in (0, N // 2):
        v = c[:, col]
        c[:, col] = 0.5 * (v + np.conj(v[idx]))
    return c


def single_mode(N: int, k1: int, k2: int, amplitude: float = 1.0, phase: str = "cos") -> TorusField:
    """amplitude * cos(k.x) or amplitude * sin(k.x)."""
    x = TWO_PI * np.arange(N) / N
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    arg = k1 * X1 + k2 * X2
    return TorusField.from_values(amplitude * (np.cos(arg) if phase == "cos" else np.sin(arg)))


# ---------------------------------------------------------------------------
# operations


def apply_symbol(coeffs: np.ndarray, m: MultiplierSymbol) -> np.ndarray:
    N = coeffs.shape[-2]
    return coeffs * m.values(N)


def apply_multiplier(f: TorusField, m: MultiplierSymbol) -> TorusField:
    c = f.coeffs
    if m.kind == "lambda_pow" and m.s < 0 and abs(c[0, 0]) > 1e-12 * max(np.max(np.abs(c)), 1e-300):
        raise ValueError("negative power on mean")
    return TorusField(coeffs=apply_symbol(f.coeffs, m))


def freq_truncate_coeffs(coeffs: np.ndarray, lam: float) -> np.ndarray:
    N = coeffs.shape[-2]
    return coeffs * bump(grid(N).kabs / float(lam))


def freq_truncate(f: TorusField, lam: float) -> TorusField:
    if lam <= 0:
        raise ValueError("cutoff must be positive")
    return TorusField(coeffs=freq_truncate_coeffs(f.coeffs, lam))


@dataclass
class LPDecomposition:
    blocks: list
    indices: list

    def reconstruct(self) -> TorusField:
        acc = np.zeros_like(self.blocks[0].coeffs)
        for b in self.blocks:
            acc = acc + b.coeffs
        return TorusField(coeffs=acc)

    def nonzero(self, tol: float = 0.0) -> list:
        return [j for j, b in zip(self.indices, self.blocks) if np.abs(b.coeffs).max() > tol]


def lp_decompose(f: TorusField) -> LPDecomposition:
    syms = lp_symbols(f.N)
    blocks = [TorusField(coeffs=f.coeffs * s) for s in syms]
    return LPDecomposition(blocks=blocks, indices=list(range(-1, len(syms) - 1)))


# norms -----------------------------------------------------------------------


@dataclass(frozen=True)
class Linf:
    pass


@dataclass(frozen=True)
class Besov:
    s: float
    p: float = np.inf
    q: float = np.inf


@dataclass(frozen=True)
class HolderLP:
    s: float


@dataclass(frozen=True)
class HdotSobolev:
    s: float


@dataclass(frozen=True)
class Xnorm:
    pass


def linf_coeffs(coeffs: np.ndarray, oversample: int = DEFAULT_OVERSAMPLE) -> np.ndarray:
    """Sup norm of each field in a stack (leading axes preserved)."""
    N = coeffs.shape[-2]
    v = inverse(coeffs, N * max(1, int(oversample)))
    return np.abs(v).max(axis=(-2, -1))


def lp_norm_values(values: np.ndarray, p: float) -> np.ndarray:
    if np.isinf(p):
        return np.abs(values).max(axis=(-2, -1))
    M = values.shape[-1]
    return (np.sum(np.abs(values) ** p, axis=(-2, -1)) * (TWO_PI / M) ** 2) ** (1.0 / p)


def xnorm_coeffs(coeffs: np.ndarray, oversample: int = DEFAULT_OVERSAMPLE) -> np.ndarray:
    N = coeffs.shape[-2]
    out = linf_coeffs(coeffs, oversample)
    for j in (1, 2):
        out = out + linf_coeffs(coeffs * riesz_odd(j).values(N), oversample)
    return out


def lp_block_values(coeffs: np.ndarray, oversample: int = DEFAULT_OVERSAMPLE) -> list:
    """Physical values of every Littlewood-Paley block, [(j, values (..., Mj, Mj))].

    Block j lives in |k| < 2^(j+2), so all but the last are sampled on a grid sized
    to their own band instead of the full grid.
    """
    N = coeffs.shape[-2]
    os_ = max(1, int(oversample))
    M = N * os_
    J = lp_levels(N)
    out = []
    for j, sym in zip(range(-1, J), lp_symbols(N)):
        Mj = M if j == J - 1 else min(M, os_ * (4 * 2 ** (j + 2) + 2))
        c = coeffs * sym
        if Mj < N:
            c = resize(c, Mj)
        out.append((j, inverse(c, Mj)))
    return out


def besov_from_blocks(blocks: list, s: float, p: float = np.inf, q: float = np.inf) -> np.ndarray:
    terms = np.stack([2.0 ** (j * s) * lp_norm_values(v, p) for j, v in blocks], axis=0)
    if np.isinf(q):
        return terms.max(axis=0)
    return np.sum(terms**q, axis=0) ** (1.0 / q)


def besov_coeffs(coeffs: np.ndarray, s: float, p: float = np.inf, q: float = np.inf,
                 oversample: int = DEFAULT_OVERSAMPLE) -> np.ndarray:
    return besov_from_blocks(lp_block_values(coeffs, oversample), s, p, q)


def hdot_coeffs(coeffs: np.ndarray, s: float) -> np.ndarray:
    g = grid(coeffs.shape[-2])
    w = np.where(g.kabs > 0, np.power(np.where(g.kabs > 0, g.kabs, 1.0), 2 * s), 0.0) * g.weight
    # Parseval: int |f|^2 = (2 pi)^-2 sum |f_hat|^2
    return np.sqrt(np.sum(w * np.abs(coeffs) ** 2, axis=(-2, -1))) / TWO_PI


def norm_coeffs(coeffs: np.ndarray, which, oversample: int = DEFAULT_OVERSAMPLE):
    if isinstance(which, Linf):
        return linf_coeffs(coeffs, oversample)
    if isinstance(which, Xnorm):
        return xnorm_coeffs(coeffs, oversample)
    if isinstance(which, HdotSobolev):
        return hdot_coeffs(coeffs, which.s)
    if isinstance(which, HolderLP):
        if float(which.s).is_integer():
            raise ValueError("integer Hölder order unsupported")
        return besov_coeffs(coeffs, which.s, np.inf, np.inf, oversample)
    if isinstance(which, Besov):
        return besov_coeffs(coeffs, which.s, which.p, which.q, oversample)
    raise TypeError(f"unknown norm kind {which!r}")


def norm(f: TorusField, which, oversample: int = DEFAULT_OVERSAMPLE) -> float:
    return float(norm_coeffs(f.coeffs, which, oversample))


def invert_gradient_coeffs(v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """Scalar q with grad q equal to the gradient part of (v1, v2); means dropped."""
    g = grid(v1.shape[-2])
    q = 1j * (g.k1 * v1 + g.k2 * v2) * _safe_inverse(g.ksq)
    q[..., 0, 0] = 0.0
    return q


def invert_gradient(v: tuple) -> TorusField:
    v1, v2 = v
    return TorusField(coeffs=invert_gradient_coeffs(v1.coeffs, v2.coeffs))


def gradient(f: TorusField) -> tuple:
    return (apply_multiplier(f, grad(1)), apply_multiplier(f, grad(2)))


def perp_gradient(f: TorusField) -> tuple:
    return (apply_multiplier(f, perp_grad(1)), apply_multiplier(f, perp_grad(2)))


def random_bandlimited(N: int, kmax: float, rng: np.random.Generator, decay: float = 0.0) -> TorusField:
    """Random real mean-free trigonometric polynomial with modes |k| <= kmax."""
    g = grid(N)
    c = rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)
    mask = (g.kabs <= kmax) & (g.kabs > 0)
    amp = np.where(g.kabs > 0, np.power(np.where(g.kabs > 0, g.kabs, 1.0), -decay), 0.0)
    c = c * mask * amp
    c[N // 2, :] = 0.0
    c[:, -1] = 0.0
    return TorusField(coeffs=_hermitize(c))
