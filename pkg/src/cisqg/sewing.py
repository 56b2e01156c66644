"""Sewing of two-parameter germs on dyadic partitions, Young-type convolutions and
the exponential Schauder bound.

Sampled drivers are extended between samples by linear interpolation, which makes
the germ defined at every dyadic point; the sewing limit of such a germ equals the
cell-wise closed form used by `young_convolution_path`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class SewingError(RuntimeError):
    pass


@dataclass
class Germ:
    """A(s, t), vectorized over arrays of s and t; alpha/beta are the claimed exponents."""

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    alpha: float = 0.5
    beta: float = 2.0

    def __call__(self, s, t):
        return self.evaluator(np.asarray(s, dtype=float), np.asarray(t, dtype=float))

    def delta(self, s, u, t):
        return self(s, t) - self(s, u) - self(u, t)


@dataclass
class SewingResult:
    times: np.ndarray
    path: np.ndarray
    delta_norm: float
    apriori_constant: float
    depth: int
    contraction: float
    error_estimate: float

    def increment(self, i: int, j: int) -> float:
        return float(self.path[j] - self.path[i])


def riemann_sums(germ: Germ, t0: float, t1: float, coarse: int, depth: int) -> np.ndarray:
    """Sum of A over the depth-`depth` dyadic partition, grouped by depth-`coarse` cells."""
    n = 2**depth
    pts = t0 + (t1 - t0) * np.arange(n + 1) / n
    vals = germ(pts[:-1], pts[1:])
    vals = vals.reshape(2**coarse, 2 ** (depth - coarse))
    return _pairwise_rows(vals)


def _pairwise_rows(a: np.ndarray) -> np.ndarray:
    # pairwise reduction along axis 1 (power-of-two width)
    while a.shape[1] > 1:
        a = a[:, 0::2] + a[:, 1::2]
    return a[:, 0]


def sew(germ: Germ, levels: int, t0: float = 0.0, t1: float = 1.0, tol: float = 1e-9,
        coarse: int | None = None, max_depth: int = 24, norm_depth: int | None = None) -> SewingResult:
    """Sewing map of `germ` on [t0, t1].

    Riemann sums over successively finer dyadic partitions are compared; the limit
    is extrapolated with the measured contraction ratio and accepted once two
    consecutive extrapolations agree to `tol` (relative).  `levels` is the minimum
    refinement depth below the output cells.
    """
    if levels < 4:
        raise ValueError("levels must be at least 4")
    if germ.beta <= 1.0:
        raise SewingError("germ not sewable at this resolution")
    if coarse is None:
        coarse = min(levels, 6)
    prev_sum = None
    prev_ext = None
    diffs: list[float] = []
    ratios: list[float] = []
    err = np.inf
    result = None
    hits = 0
    depth = coarse
    while True:
        S = riemann_sums(germ, t0, t1, coarse, depth)
        scale = max(float(np.max(np.abs(S))), 1e-300)
        ok = False
        if prev_sum is not None:
            diff = float(np.max(np.abs(S - prev_sum)))
            if diffs and diffs[-1] > 0:
                ratios.append(diff / diffs[-1])
            diffs.append(diff)
            floor = 1e3 * np.finfo(float).eps * scale
            # non-contracting: the last four refinements did not improve on the four before
            if len(diffs) >= 8 and max(diffs[-4:]) > floor and max(diffs[-4:]) >= max(diffs[-8:-4]):
                raise SewingError("germ not sewable at this resolution")
            if diff <= max(tol * scale * 1e-3, floor):
                ext, err = S, diff
                ok = True
            else:
                rho = ratios[-1] if ratios else 0.5
                rho = min(max(rho, 0.0), 0.95)
                ext = S + (S - prev_sum) * rho / (1.0 - rho)
                if prev_ext is not None:
                    err = float(np.max(np.abs(ext - prev_ext)))
                    ok = err <= tol * scale
            prev_ext = ext
            hits = hits + 1 if ok else 0
            if hits >= 2 and depth - coarse >= levels:
                result = ext
                break
        prev_sum = S
        depth += 1
        if depth > max_depth:
            raise SewingError("germ not sewable at this resolution")
    path = np.concatenate([[0.0], np.cumsum(result)])
    times = t0 + (t1 - t0) * np.arange(2**coarse + 1) / 2**coarse
    nd = norm_depth if norm_depth is not None else min(coarse + levels, 14)
    dnorm = delta_norm(germ, t0, t1, nd)
    c = apriori_constant(germ, times, path, dnorm)
    return SewingResult(times, path, dnorm, c, depth, float(ratios[-1]) if ratios else 0.0, float(err))


def delta_norm(germ: Germ, t0: float, t1: float, depth: int) -> float:
    """sup over dyadic triples (s, midpoint, t) up to `depth` of |dA| / |t - s|^beta."""
    best = 0.0
    for d in range(depth):
        n = 2**d
        pts = t0 + (t1 - t0) * np.arange(n + 1) / n
        s, t = pts[:-1], pts[1:]
        u = 0.5 * (s + t)
        dA = np.abs(germ.delta(s, u, t))
        best = max(best, float(np.max(dA / (t - s) ** germ.beta)))
    return best


def apriori_constant(germ: Germ, times: np.ndarray, path: np.ndarray, dnorm: float) -> float:
    """sup over dyadic sub-intervals of the output grid of |IA_{s,t} - A_{s,t}| / (|dA|_beta |t-s|^beta)."""
    if dnorm <= 0:
        return 0.0
    n = len(times) - 1
    best = 0.0
    step = n
    while step >= 1:
        i = np.arange(0, n, step)
        j = i + step
        s, t = times[i], times[j]
        dev = np.abs(path[j] - path[i] - germ(s, t))
        best = max(best, float(np.max(dev / (dnorm * (t - s) ** germ.beta))))
        step //= 2
    return best


# ---------------------------------------------------------------------------
# Young convolution against a sampled driver


def interpolant(times: np.ndarray, values: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)

    def f(r):
        return np.interp(r, times, values)

    return f


def convolution_germ(beta, lam_gamma: float, t: float, hurst: float = 0.5) -> Germ:
    """Germ A_{s,r} = exp(-lam_gamma (t - s)) (beta_r - beta_s) for a callable driver."""

    def ev(s, r):
        return np.exp(-lam_gamma * (t - s)) * (beta(r) - beta(s))

    return Germ(ev, alpha=hurst, beta=1.0 + hurst)


def young_convolution(beta, lam_gamma: float, t: float, times: np.ndarray | None = None,
                      levels: int = 6, tol: float = 1e-9, hurst: float = 0.5) -> float:
    """int_0^t exp(-lam_gamma (t - r)) d beta_r by sewing.

    beta: callable r -> beta_r, or sampled values on `times` (linearly interpolated).
    """
    if lam_gamma < 0:
        raise ValueError("lam_gamma must be nonnegative")
    if not callable(beta):
        beta = interpolant(times, beta)
    t_start = 0.0 if times is None else float(times[0])
    if t <= t_start:
        return 0.0
    if lam_gamma == 0.0:
        return float(beta(np.array(t)) - beta(np.array(t_start)))
    germ = convolution_germ(beta, lam_gamma, t, hurst)
    res = sew(germ, levels, t_start, t, tol=tol, coarse=0, norm_depth=0)
    return float(res.path[-1])


def phi1(x: np.ndarray) -> np.ndarray:
    """(1 - exp(-x)) / x, continuous at 0."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x > 1e-8
    out[nz] = -np.expm1(-x[nz]) / x[nz]
    small = ~nz
    out[small] = 1.0 - x[small] / 2.0 + x[small] ** 2 / 6.0
    return out


def young_convolution_path(increments: np.ndarray, lam_gamma, dt: float) -> np.ndarray:
    """Sewing limit at every grid time for linearly interpolated drivers.

    increments: array (T-1, ...) of driver increments per cell; lam_gamma broadcasts
    against the trailing axes.  Returns (T, ...) with value 0 at the first time.
    Cell integral: exp(-lam_gamma (t - r_{i+1})) * d_beta_i * phi1(lam_gamma dt).
    """
    increments = np.asarray(increments)
    lam_gamma = np.asarray(lam_gamma, dtype=float)
    decay = np.exp(-lam_gamma * dt)
    gain = phi1(lam_gamma * dt)
    out = np.zeros((increments.shape[0] + 1,) + increments.shape[1:], dtype=increments.dtype)
    acc = np.zeros(increments.shape[1:], dtype=increments.dtype)
    for i in range(increments.shape[0]):
        acc = decay * acc + gain * increments[i]
        out[i + 1] = acc
    return out


# ---------------------------------------------------------------------------


@dataclass
class SchauderReport:
    max_ratio: float
    holds: bool
    rows: list


def check_schauder(a: float, theta: float, pairs) -> SchauderReport:
    """|exp(-a t) - exp(-a s)| <= 2^(1-theta) (a (t - s))^theta for each (s, t)."""
    if a < 0 or not 0.0 <= theta <= 1.0:
        raise ValueError("need a >= 0 and theta in [0, 1]")
    rows = []
    worst = 0.0
    for s, t in pairs:
        if s > t:
            raise ValueError("pairs must satisfy s <= t")
        lhs = abs(np.exp(-a * t) - np.exp(-a * s))
        rhs = 2.0 ** (1.0 - theta) * (a * (t - s)) ** theta if theta > 0 else 2.0
        ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
        worst = max(worst, ratio)
        rows.append((s, t, lhs, rhs, ratio))
    return SchauderReport(worst, worst <= 1.0, rows)
