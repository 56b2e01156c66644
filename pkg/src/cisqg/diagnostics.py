"""Residual ledger, iteration inequality, weak-form defects and probes on scheme output.

Pairings use the Fourier convention of `spectral`:  <f, h> = (2 pi)^-2 sum_k f_hat(k) h_hat(-k),
and the transport form

    <Lambda g, grad_perp g' . grad xi> = (2 pi)^-4 sum_{k,l} |k| (k2 l1 - k1 l2) g_hat(k) g'_hat(l) xi_hat(-k-l).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from . import controls
from . import spectral as sp
from . import timeline as tl
from .noise import NoisePath, unit_windows

FOUR_PI2 = (2.0 * np.pi) ** 2


# ---------------------------------------------------------------------------
# Monte-Carlo norms with bootstrap intervals


@dataclass
class MCEstimate:
    value: float
    ci_lo: float
    ci_hi: float
    samples: int

    def as_dict(self) -> dict:
        return asdict(self)


def window_sups(values: np.ndarray, times: np.ndarray, grid: tl.TimeGrid) -> np.ndarray:
    """sup of a per-frame quantity over each unit window; values has shape (F,) at `times`."""
    out = []
    for a, b in unit_windows(grid):
        inside = (times >= a - 1e-9) & (times <= b + 1e-9)
        out.append(float(np.max(values[inside])) if np.any(inside) else 0.0)
    return np.array(out)


def local_moment(rows: np.ndarray, p: float) -> float:
    """rows (samples, windows): L^p moment per window, then the sup over windows."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    return float(np.max(np.mean(rows**p, axis=0) ** (1.0 / p)))


def mc_local_norm(rows, p: float, bootstrap: int = 400, seed: int = 0) -> MCEstimate:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    if len(rows) == 0:
        raise ValueError("empty ensemble")
    val = local_moment(rows, p)
    rng = np.random.default_rng(seed)
    boots = np.array([local_moment(rows[rng.integers(0, len(rows), len(rows))], p) for _ in range(bootstrap)])
    return MCEstimate(val, float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5)), len(rows))


def calibrate_C_start(q0_bound: float, Cz: float) -> float:
    """Smallest integer C_start >= 1 with C_start (Cz^2 + 1) >= q0_bound."""
    return float(max(1, math.ceil(q0_bound / (Cz**2 + 1.0) - 1e-12)))


# ---------------------------------------------------------------------------
# error ledger


def _exp(x: float) -> float:
    return math.exp(x) if x < 709.0 else math.inf


def _logsumexp(xs) -> float:
    xs = [x for x in xs if x > -math.inf]
    if not xs:
        return -math.inf
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def log_sum_dec(seq: list, N: int, alpha: float) -> float:
    """log of sum_{n=1}^{N} 4^(N-n) ell_n^-alpha r_{n-1}^(1/2), with ell_n = 1/lambda_n."""
    return _logsumexp([(N - n) * math.log(4.0) + alpha * seq[n].log_lam + 0.5 * seq[n - 1].log_r
                       for n in range(1, N + 1)])


def sum_dec(seq: list, N: int, alpha: float) -> float:
    return _exp(log_sum_dec(seq, N, alpha))


def log_error_terms(cp: controls.ControlParams, n: int, Cz: float, alpha: float | None = None,
                    kappa: float | None = None, nu: float | None = None, gamma: float | None = None) -> dict:
    """Logarithms of the six error contributions bounding the level-n residual (n = N + 1 >= 1).

    Evaluated in log space so that planner-sized a (lambda_1 with hundreds of digits) stays finite.
    """
    if n < 1:
        raise ValueError("error terms start at level 1")
    alpha = cp.alpha if alpha is None else alpha
    kappa = cp.kappa if kappa is None else kappa
    nu = cp.nu if nu is None else nu
    gamma = cp.gamma if gamma is None else gamma
    seq = controls.sequences(cp, n)
    N = n - 1
    lN, l1 = seq[N].log_lam, seq[n].log_lam
    m1 = seq[n].log_mu
    rN = seq[N].log_r
    Sa, S0 = log_sum_dec(seq, N, alpha), log_sum_dec(seq, N, 0.0)
    log_ell_a = -alpha * l1
    lz = math.log(Cz) if Cz > 0 else -math.inf
    LL = math.log(l1)
    ninf = -math.inf
    miss = _logsumexp([math.log(m1) + 2 * _logsumexp([lN - m1, m1 - l1]), lN - l1]) + rN
    com = LL + _logsumexp([
        lN + log_ell_a + Sa + S0,
        0.5 * lN + _logsumexp([log_ell_a + Sa, -kappa * lN + S0]) + lz,
        _logsumexp([log_ell_a, -kappa * lN]) + 2 * lz,
    ])
    return {
        "miss": miss,
        "com": com,
        "time": LL - 1.5 * l1 + 0.5 * rN + l1,
        "dis": LL + math.log(abs(nu)) + (gamma - 1.5) * l1 + 0.25 * rN if nu != 0 else ninf,
        "trans": LL + 0.5 * lN - 0.5 * l1 + 0.5 * rN + S0,
        "sto": LL - 0.5 * l1 + 0.5 * rN + lz,
    }


def error_terms(cp: controls.ControlParams, n: int, Cz: float, **kw) -> dict:
    """The six error contributions at level n (floats; +inf only if a term truly overflows)."""
    return {k: (_exp(v) if v > -math.inf else 0.0) for k, v in log_error_terms(cp, n, Cz, **kw).items()}


ERROR_KEYS = ("miss", "com", "time", "dis", "trans", "sto")
LEDGER_COLUMNS = ("level", "quantity", "value", "ci_lo", "ci_hi", "target", "pass")


@dataclass
class ResidualLedger:
    mode: str
    Cz: float
    levels: list = field(default_factory=list)  # one dict per level

    def rows(self) -> list:
        out = []
        for lv in self.levels:
            n = lv["n"]
            q = lv.get("q")
            if q is not None:
                out.append((n, "q_norm", q["value"], q["ci_lo"], q["ci_hi"], lv["r"], q["ci_hi"] <= lv["r"]))
            out.append((n, "r", lv["r"], "", "", "", ""))
            for k in ERROR_KEYS:
                if k in lv.get("errors", {}):
                    out.append((n, "E_" + k, lv["errors"][k], "", "", "", ""))
            for k in ("S_alpha", "S_0"):
                if k in lv:
                    out.append((n, k, lv[k], "", "", "", ""))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LEDGER_COLUMNS)
            for r in self.rows():
                w.writerow([_fmt(x) for x in r])

    def to_json(self) -> dict:
        return {"mode": self.mode, "Cz": self.Cz, "levels": self.levels}

    @classmethod
    def from_json(cls, d: dict) -> "ResidualLedger":
        return cls(d["mode"], d["Cz"], d["levels"])


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return x


def error_ledger(cp: controls.ControlParams, Cz_hat: float, n_max: int, q_estimates: dict | None = None,
                 alpha: float | None = None) -> ResidualLedger:
    """Ledger of levels 0..n_max: target r_n, measured residual norms, error terms and sums."""
    alpha = cp.alpha if alpha is None else alpha
    seq = controls.sequences(cp, n_max)
    led = ResidualLedger(cp.mode, float(Cz_hat))
    q_estimates = q_estimates or {}
    for n in range(n_max + 1):
        lv = {"n": n, "r": seq[n].r, "S_alpha": sum_dec(seq, n, alpha), "S_0": sum_dec(seq, n, 0.0)}
        if n >= 1:
            lv["errors"] = error_terms(cp, n, Cz_hat, alpha=alpha)
        est = q_estimates.get(n)
        if est is not None:
            lv["q"] = est.as_dict() if isinstance(est, MCEstimate) else dict(est)
        led.levels.append(lv)
    return led


@dataclass
class InequalityReport:
    C: float
    rows: list  # (n, C * sum E, r_n, r_n / (C * sum E), holds)

    @property
    def all_hold(self) -> bool:
        return all(r[4] for r in self.rows)

    def violation_ratio(self) -> float:
        return max((r[1] / r[2] for r in self.rows), default=0.0)


def check_iteration_inequality(ledger: ResidualLedger, C: float, cp: controls.ControlParams | None = None) -> InequalityReport:
    """C (E_miss + ... + E_sto) <= r_n for each level n >= 1 in the ledger.

    With `cp` the comparison is made in log space (needed when lambda_n overflows a float).
    """
    if not C > 1:
        raise ValueError("the constant C must exceed 1")
    rows = []
    for lv in ledger.levels:
        n = lv["n"]
        if n < 1:
            continue
        if cp is not None:
            seq = controls.sequences(cp, n)
            log_lhs = math.log(C) + _logsumexp(list(log_error_terms(cp, n, ledger.Cz).values()))
            margin = seq[n].log_r - log_lhs
            rows.append((n, _exp(log_lhs), lv["r"], _exp(margin), margin >= 0))
            continue
        lhs = C * sum(lv["errors"][k] for k in ERROR_KEYS)
        rows.append((n, lhs, lv["r"], lv["r"] / lhs if lhs > 0 else math.inf, lhs <= lv["r"]))
    return InequalityReport(C, rows)


# ---------------------------------------------------------------------------
# sparse spectra


_CODE = 1 << 24


def _encode(k1, k2):
    return (np.asarray(k1, dtype=np.int64) + _CODE // 2) * _CODE + (np.asarray(k2, dtype=np.int64) + _CODE // 2)


class SparseSpectrum:
    """Full-plane Fourier coefficients on a fixed support; vals has shape (F, S)."""

    def __init__(self, k1, k2, vals):
        k1, k2 = np.asarray(k1, dtype=np.int64), np.asarray(k2, dtype=np.int64)
        vals = np.atleast_2d(np.asarray(vals, dtype=complex))
        codes = _encode(k1, k2)
        uniq, first, inv = np.unique(codes, return_index=True, return_inverse=True)
        if len(uniq) != len(codes):
            merge = sparse.csr_matrix((np.ones(len(codes)), (np.arange(len(codes)), inv)),
                                      shape=(len(codes), len(uniq)))
            vals = np.asarray(vals @ merge)
        else:
            vals = vals[:, np.argsort(codes)]
        self.k1, self.k2 = k1[first], k2[first]
        self.codes = uniq
        self.vals = vals

    @property
    def kabs(self) -> np.ndarray:
        return np.hypot(self.k1, self.k2)

    def lookup(self, k1, k2) -> tuple:
        """(index, found) of modes in the support."""
        c = _encode(k1, k2)
        if len(self.codes) == 0:
            return np.zeros(np.shape(c), dtype=np.int64), np.zeros(np.shape(c), dtype=bool)
        idx = np.searchsorted(self.codes, c)
        idx = np.minimum(idx, len(self.codes) - 1)
        return idx, self.codes[idx] == c

    def __add__(self, other: "SparseSpectrum") -> "SparseSpectrum":
        return SparseSpectrum(np.concatenate([self.k1, other.k1]), np.concatenate([self.k2, other.k2]),
                              np.concatenate([self.vals, other.vals], axis=1))

    def scaled(self, factor) -> "SparseSpectrum":
        out = SparseSpectrum.__new__(SparseSpectrum)
        out.k1, out.k2, out.codes = self.k1, self.k2, self.codes
        out.vals = self.vals * factor
        return out

    def dense(self, N: int) -> np.ndarray:
        """Half-layout coefficient stack on an N grid (modes must fit)."""
        keep = self.k2 >= 0
        if np.any(np.abs(self.k1) >= N // 2) or np.any(np.abs(self.k2) >= N // 2):
            raise ValueError("support does not fit the grid")
        out = np.zeros((self.vals.shape[0], N, N // 2 + 1), dtype=complex)
        out[:, self.k1[keep] % N, self.k2[keep]] = self.vals[:, keep]
        return out

    @classmethod
    def from_coeffs(cls, coeffs: np.ndarray, tol: float = 0.0) -> "SparseSpectrum":
        """From half-layout stacks (F, N, N//2+1); support = union of nonzeros over frames."""
        coeffs = np.asarray(coeffs)
        if coeffs.ndim == 2:
            coeffs = coeffs[None]
        N = coeffs.shape[-2]
        g = sp.grid(N)
        mask = np.any(np.abs(coeffs) > tol, axis=0)
        mask[N // 2, :] = False  # drop the k1 Nyquist row
        mask[:, -1] = False
        r, c = np.nonzero(mask)
        k1 = g.k1[r, 0].astype(np.int64)
        k2 = g.k2[0, c].astype(np.int64)
        v = coeffs[:, r, c]
        pos = k2 > 0
        return cls(np.concatenate([k1, -k1[pos]]), np.concatenate([k2, -k2[pos]]),
                   np.concatenate([v, np.conj(v[:, pos])], axis=1))

    @classmethod
    def from_noise(cls, z: NoisePath, frames) -> "SparseSpectrum":
        v = z.mode_coeffs(frames)
        return cls(np.concatenate([z.k1, -z.k1]), np.concatenate([z.k2, -z.k2]),
                   np.concatenate([v, np.conj(v)], axis=1))

    @classmethod
    def from_blocks(cls, blocks, frames) -> "SparseSpectrum":
        frames = np.asarray(frames)
        k1s, k2s, vs = [], [], []
        for b in blocks:
            W = b.W
            r = np.arange(-(W // 2) + 1, W // 2)
            p1, p2 = np.meshgrid(r, r, indexing="ij")
            p1, p2 = p1.ravel(), p2.ravel()
            inside = p1 * p1 + p2 * p2 < b.mu * b.mu
            p1, p2 = p1[inside], p2[inside]
            neg = p2 < 0
            rows = np.where(neg, -p1, p1) % W
            cols = np.abs(p2)
            for K, a in zip(b.carriers, b.amps):
                av = a[frames][:, rows, cols]
                av = np.where(neg, np.conj(av), av)
                for s in (1, -1):
                    k1s.append(p1 + s * K[0])
                    k2s.append(p2 + s * K[1])
                    vs.append(0.5 * av)
        if not vs:
            return cls(np.zeros(0), np.zeros(0), np.zeros((len(frames), 0)))
        return cls(np.concatenate(k1s), np.concatenate(k2s), np.concatenate(vs, axis=1))


# ---------------------------------------------------------------------------
# test functions and weak forms


@dataclass(frozen=True)
class TestFunction:
    """xi(t, x) = eta(t) cos(j . x) (or sin), eta a smooth bump supported in |t - t_center| < width."""

    mode: tuple = (1, 0)
    t_center: float = 0.5
    width: float = 0.25
    phase: str = "cos"

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if tuple(self.mode) == (0, 0):
            raise ValueError("test mode must be nonzero")
        if self.phase not in ("cos", "sin"):
            raise ValueError("phase must be cos or sin")

    def eta(self, t) -> np.ndarray:
        s = 2.0 * (np.asarray(t, dtype=float) - self.t_center) / self.width
        return tl.profile(s) / tl.profile(np.array([0.0]))[0]

    def eta_dot(self, t) -> np.ndarray:
        s = 2.0 * (np.asarray(t, dtype=float) - self.t_center) / self.width
        return tl.profile_deriv(s) * (2.0 / self.width) / tl.profile(np.array([0.0]))[0]

    def spatial_modes(self) -> list:
        """[(m, phi_hat(m))] for the full plane."""
        j = tuple(int(x) for x in self.mode)
        mj = (-j[0], -j[1])
        c = FOUR_PI2 / 2.0
        if self.phase == "cos":
            return [(j, c), (mj, c)]
        # sin(j.x) = (e^{ijx} - e^{-ijx}) / 2i ; hat at m = -j picks e^{ijx}
        return [(mj, c / 1j), (j, -c / 1j)]

    def support(self, grid: tl.TimeGrid) -> np.ndarray:
        t = grid.times
        return np.nonzero(np.abs(t - self.t_center) < self.width)[0]

    def check_interior(self, grid: tl.TimeGrid):
        if self.t_center - self.width < grid.t0 - 1e-12 or self.t_center + self.width > grid.t_end + 1e-12:
            raise ValueError("test function must be supported in the run interior")

    def hdot4(self, grid: tl.TimeGrid) -> float:
        """||xi||_{L^1_t H^4}."""
        j = math.hypot(*self.mode)
        spatial = math.sqrt(2.0) * math.pi * j**4  # ||cos(j.x)||_{H^4} under the chosen normalization
        return float(np.sum(np.abs(self.eta(grid.times))) * grid.dt * spatial)

    def dense(self, M: int) -> np.ndarray:
        x = sp.TWO_PI * np.arange(M) / M
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        arg = self.mode[0] * X1 + self.mode[1] * X2
        return np.cos(arg) if self.phase == "cos" else np.sin(arg)


def pairing(f: SparseSpectrum, modes: list, symbol=None) -> np.ndarray:
    """<m(D) f, phi> per frame for phi given by [(m, phi_hat(m))]."""
    out = np.zeros(f.vals.shape[0], dtype=complex)
    for m, ph in modes:
        idx, ok = f.lookup(-m[0], -m[1])
        if np.any(ok):
            s = 1.0 if symbol is None else symbol(np.array([-m[0]]), np.array([-m[1]]))[0]
            out += s * f.vals[:, idx] * ph
    return (out / FOUR_PI2).real


def transport_sum(g: SparseSpectrum, g2: SparseSpectrum, m, chunk: int = 64) -> np.ndarray:
    """sum_k |k| (k2 l1 - k1 l2) g_hat(k) g2_hat(l), l = -k - m, per frame (complex)."""
    out = np.zeros(g.vals.shape[0], dtype=complex)
    l1, l2 = -g.k1 - m[0], -g.k2 - m[1]
    idx, ok = g2.lookup(l1, l2)
    ik = np.nonzero(ok)[0]
    il = idx[ok]
    if len(ik) == 0:
        return out
    coef = g.kabs[ik] * (g.k2[ik] * l1[ok] - g.k1[ik] * l2[ok])
    for s in range(0, out.shape[0], chunk):
        out[s : s + chunk] = (g.vals[s : s + chunk][:, ik] * g2.vals[s : s + chunk][:, il]) @ coef
    return out


def transport_form(g: SparseSpectrum, g2: SparseSpectrum, modes: list, cache: dict | None = None) -> np.ndarray:
    """<Lambda g, grad_perp g2 . grad phi> per frame as the explicit double Fourier sum.

    For real fields the sum at -m is the conjugate of the sum at m; `cache` keeps the sums by mode.
    """
    cache = {} if cache is None else cache
    out = np.zeros(g.vals.shape[0], dtype=complex)
    for m, ph in modes:
        m = (int(m[0]), int(m[1]))
        neg = (-m[0], -m[1])
        if m not in cache:
            cache[m] = np.conj(cache[neg]) if neg in cache else transport_sum(g, g2, m)
        out += cache[m] * ph
    return (out / FOUR_PI2**2).real


@dataclass
class WeakDefect:
    value: float  # signed defect
    time_term: float
    nonlinear: float
    dissipation: float

    @property
    def abs(self) -> float:
        return abs(self.value)


def _quad_weights(grid: tl.TimeGrid, frames: np.ndarray) -> np.ndarray:
    return np.full(len(frames), grid.dt)


def weak_residual(g: SparseSpectrum, z: SparseSpectrum, xi: TestFunction, grid: tl.TimeGrid, frames: np.ndarray,
                  nu: float = 1.0, gamma: float = 1.0, cache: dict | None = None) -> WeakDefect:
    """-int <Lambda g, d_t xi> - int <Lambda u, grad_perp u . grad xi> + nu int <Lambda^(gamma+1) g, xi>, u = g + z.

    g and z hold the frames `frames`, which must cover the temporal support of xi.  Test
    functions sharing `frames` may share `cache` (transport sums keyed by mode).
    """
    xi.check_interior(grid)
    t = grid.times[frames]
    w = _quad_weights(grid, frames)
    modes = xi.spatial_modes()
    lam = lambda k1, k2: np.hypot(k1, k2)
    lamg = lambda k1, k2: np.hypot(k1, k2) ** (gamma + 1.0)
    time_term = -float(np.sum(w * xi.eta_dot(t) * pairing(g, modes, lam)))
    diss = nu * float(np.sum(w * xi.eta(t) * pairing(g, modes, lamg)))
    u = g + z
    nl = -float(np.sum(w * xi.eta(t) * transport_form(u, u, modes, cache)))
    return WeakDefect(time_term + nl + diss, time_term, nl, diss)


def theta_defect(g: np.ndarray, z: np.ndarray, xi: TestFunction, grid: tl.TimeGrid, frames: np.ndarray,
                 nu: float = 1.0, gamma: float = 1.0) -> WeakDefect:
    """Same defect in the active-scalar variables theta = Lambda(g + z), evaluated in physical space.

    g, z: half-layout stacks (F, M, M//2+1) on a grid that holds every product exactly.
    Nonlinearity:  (1/2) <theta, R_perp . (theta grad xi) - grad xi . R_perp theta>;
    the noise pairing is replaced by the linear terms of theta_z = Lambda z.
    """
    xi.check_interior(grid)
    M = g.shape[-2]
    sg = sp.grid(M)
    t = grid.times[frames]
    w = _quad_weights(grid, frames)
    phi = xi.dense(M)
    ph = sp.forward(phi)
    dphi = (sp.inverse(-1j * sg.k1 * ph), sp.inverse(-1j * sg.k2 * ph))
    inv = np.where(sg.kabs > 0, 1.0 / np.where(sg.kabs > 0, sg.kabs, 1.0), 0.0)
    # R_perp = grad_perp Lambda^-1 : symbols (i k2, -i k1) / |k|
    rp = (1j * sg.k2 * inv, -1j * sg.k1 * inv)
    quad = (sp.TWO_PI / M) ** 2
    th = sg.kabs * (g + z)
    th_g = sg.kabs * g
    theta = sp.inverse(th)
    rpt = [sp.inverse(s * th) for s in rp]
    comm = np.zeros_like(theta)
    for i in (0, 1):
        comm += sp.inverse(rp[i] * sp.forward(theta * dphi[i]))
        comm -= dphi[i] * rpt[i]
    nl_t = 0.5 * quad * np.sum(theta * comm, axis=(-2, -1))
    lin_t = quad * np.sum(sp.inverse(th_g) * phi, axis=(-2, -1))
    dis_t = quad * np.sum(sp.inverse(sg.kabs**gamma * th_g) * phi, axis=(-2, -1))
    time_term = -float(np.sum(w * xi.eta_dot(t) * lin_t))
    diss = nu * float(np.sum(w * xi.eta(t) * dis_t))
    nl = float(np.sum(w * xi.eta(t) * nl_t))
    return WeakDefect(time_term + nl + diss, time_term, nl, diss)


def state_spectra(state, z: NoisePath, frames) -> tuple:
    """Sparse spectra of g_{<=n} and of the full noise at `frames`."""
    frames = np.asarray(frames)
    return SparseSpectrum.from_blocks(state.blocks.blocks, frames), SparseSpectrum.from_noise(z, frames)


def default_test_functions(grid: tl.TimeGrid) -> list:
    """cos and sin tests on five low modes with one bump centred in the run."""
    c = 0.5 * (grid.t0 + grid.t_end)
    w = 0.4 * grid.span
    return [TestFunction(m, c, w, ph) for m in ((1, 0), (0, 1), (1, 1), (1, -1), (2, 1)) for ph in ("cos", "sin")]


def state_defects(state, z: NoisePath, tests=None, nu: float = 1.0, gamma: float = 1.0) -> list:
    """Weak defects of g_{<=n} with the full noise z for each test function."""
    tests = default_test_functions(state.grid) if tests is None else tests
    groups: dict = {}
    for i, xi in enumerate(tests):
        groups.setdefault((xi.t_center, xi.width), []).append(i)
    out = [None] * len(tests)
    for idx in groups.values():
        frames = tests[idx[0]].support(state.grid)
        g, zs = state_spectra(state, z, frames)
        cache: dict = {}
        for i in idx:
            out[i] = weak_residual(g, zs, tests[i], state.grid, frames, nu, gamma, cache)
    return out


def total_defect(state, z: NoisePath, tests=None, nu: float = 1.0, gamma: float = 1.0) -> float:
    """Sum of absolute weak defects over the test functions."""
    return float(sum(d.abs for d in state_defects(state, z, tests, nu, gamma)))


# ---------------------------------------------------------------------------
# regularity probe


class RegularityRangeError(ValueError):
    pass


def regularity_regime(theta_t: float, theta_x: float, alpha: float, b: int, beta: float) -> int:
    """1 (high spatial) or 2 (high temporal) for an admissible exponent pair."""
    if not (0 <= theta_t < 1 and 0 <= theta_x < 1):
        raise RegularityRangeError("exponents outside the admissible regularity range")
    if not theta_t + theta_x < 0.5 + beta / (2 * b):
        raise RegularityRangeError("exponents outside the admissible regularity range")
    edge = 0.5 - alpha + beta / (2 * b)
    if theta_x >= edge and theta_t < alpha - (theta_x - edge) / b:
        return 1
    if theta_x < edge and theta_t < alpha:
        return 2
    raise RegularityRangeError("exponents outside the admissible regularity range")


def predicted_rate(theta_t: float, theta_x: float, alpha: float, b: int, beta: float) -> float:
    """Decay rate varsigma_i > 0 of the level increments, a^(-n varsigma_i)."""
    reg = regularity_regime(theta_t, theta_x, alpha, b, beta)
    first = b * (theta_t + theta_x - 0.5) - beta / 2
    if reg == 1:
        second = b * b * (theta_t - alpha) + b * (theta_x + alpha - 0.5) - beta / 2
    else:
        second = theta_t - alpha
    return -max(first, second)


@dataclass
class RegularityReport:
    regime: int
    predicted_rate: float
    increments: list  # per level n: seminorm of g_{<=n} - g_{<=n-1}
    fitted_slope: float  # d log(increment) / dn
    decays: bool


def _space_norm(theta_x: float):
    if theta_x == 0:
        return sp.Linf()
    return sp.HolderLP(theta_x)


def increment_norm(diff: np.ndarray, grid: tl.TimeGrid, theta_t: float, theta_x: float,
                   oversample: int = 1) -> float:
    """[diff]_{C^theta_t C^theta_x} (theta_t > 0) or sup_t ||diff||_{C^theta_x} (theta_t = 0)."""
    which = _space_norm(theta_x)
    if theta_t == 0:
        return float(np.max(sp.norm_coeffs(diff, which, oversample)))
    f = tl.SpaceTimeField(grid, diff)
    return max(tl.time_holder_seminorm(f, theta_t, w, which, oversample=oversample) for w in unit_windows(grid))


def regularity_probe(states: list, cp: controls.ControlParams, theta_t: float, theta_x: float,
                     M: int | None = None, oversample: int = 1) -> RegularityReport:
    reg = regularity_regime(theta_t, theta_x, cp.alpha, cp.b, cp.beta)
    rate = predicted_rate(theta_t, theta_x, cp.alpha, cp.b, cp.beta)
    if M is None:
        M = sp.fast_even_size(2 * max(s.blocks.band for s in states) + 4)
    T = states[0].grid.count
    prev = np.zeros((T, M, M // 2 + 1), dtype=complex)
    incs = []
    for s in states[1:]:
        cur = s.g_coeffs(M)
        incs.append(increment_norm(cur - prev, s.grid, theta_t, theta_x, oversample))
        prev = cur
    slope = float(np.polyfit(np.arange(1, len(incs) + 1), np.log(incs), 1)[0]) if len(incs) >= 2 else float("nan")
    return RegularityReport(reg, rate, incs, slope, bool(len(incs) >= 2 and slope < 0))


# ---------------------------------------------------------------------------
# probes on g


def g_local_norm(state, M: int | None = None, oversample: int = 1, frames=None) -> np.ndarray:
    """sup over each unit window of ||g_{<=n}(t)||_{B^{1/2}_{inf,1}}."""
    if M is None:
        M = sp.fast_even_size(2 * state.blocks.band + 4)
    T = state.grid.count
    frames = np.arange(T) if frames is None else np.asarray(frames)
    vals = np.zeros(len(frames))
    for s in range(0, len(frames), 32):
        fr = frames[s : s + 32]
        vals[s : s + len(fr)] = sp.besov_coeffs(state.g_coeffs(M, fr), 0.5, np.inf, 1.0, oversample)
    return window_sups(vals, state.grid.times[frames], state.grid)


@dataclass
class NonuniquenessReport:
    difference: float
    defect_a: float
    defect_b: float
    comparable: bool
    differ: bool

    @property
    def passed(self) -> bool:
        return self.differ and self.comparable


def nonuniqueness_probe(states_a: list, states_b: list, z: NoisePath, tests=None, nu: float = 1.0,
                        gamma: float = 1.0, ratio: float = 10.0) -> NonuniquenessReport:
    """Compare two runs on the same noise: C_loc B^{1/2}_{inf,1} distance and weak defects."""
    sa, sb = states_a[-1], states_b[-1]
    M = sp.fast_even_size(2 * max(sa.blocks.band, sb.blocks.band) + 4)
    T = sa.grid.count
    vals = np.zeros(T)
    for s in range(0, T, 32):
        fr = np.arange(s, min(T, s + 32))
        vals[fr] = sp.besov_coeffs(sa.g_coeffs(M, fr) - sb.g_coeffs(M, fr), 0.5, np.inf, 1.0, 1)
    diff = float(np.max(window_sups(vals, sa.grid.times, sa.grid)))
    da = total_defect(sa, z, tests, nu, gamma)
    db = total_defect(sb, z, tests, nu, gamma)
    hi, lo = max(da, db), min(da, db)
    comparable = hi == 0 or (lo > 0 and hi / lo <= ratio)
    return NonuniquenessReport(diff, da, db, bool(comparable), diff > 1e-6)


@dataclass
class QuadraticFit:
    coeffs: tuple  # (c0, c1, c2) of y = c0 + c1 x + c2 x^2
    c2_ci: tuple
    consistent_with_zero: bool


def linearity_fit(x: np.ndarray, rows: list, p: float, bootstrap: int = 400, seed: int = 0) -> QuadraticFit:
    """Quadratic fit of the MC norm of g against Cz across noise scalings.

    x: Cz per scaling; rows[i]: (samples, windows) per-sample window sups for scaling i.
    The interval on c2 comes from resampling the samples within every scaling.
    """
    x = np.asarray(x, dtype=float)
    y = np.array([local_moment(r, p) for r in rows])
    c2, c1, c0 = np.polyfit(x, y, 2)
    rng = np.random.default_rng(seed)
    boots = np.empty(bootstrap)
    for b in range(bootstrap):
        yb = [local_moment(r[rng.integers(0, len(r), len(r))], p) for r in rows]
        boots[b] = np.polyfit(x, yb, 2)[0]
    lo, hi = float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5))
    return QuadraticFit((float(c0), float(c1), float(c2)), (lo, hi), bool(lo <= 0.0 <= hi))


# ---------------------------------------------------------------------------
# carrier directions


def direction_symbol(directions, k1, k2) -> np.ndarray:
    """sum_j m_{l_j}(k) R_j^o(k), m_l(k) = (l.k)(l_perp.k)/|k|^2; cancellation needs a constant."""
    k1, k2 = np.asarray(k1, dtype=float), np.asarray(k2, dtype=float)
    ksq = k1 * k1 + k2 * k2
    out = np.zeros(np.broadcast(k1, k2).shape)
    for j, l in enumerate(directions, start=1):
        m = (l[0] * k1 + l[1] * k2) * (-l[1] * k1 + l[0] * k2) / ksq
        out = out + m * sp.riesz_odd_symbol(j, k1, k2)
    return out


def direction_spread(directions, kmax: int = 8) -> float:
    r = np.arange(-kmax, kmax + 1)
    k1, k2 = np.meshgrid(r, r, indexing="ij")
    keep = (k1 != 0) | (k2 != 0)
    s = direction_symbol(directions, k1[keep], k2[keep])
    return float(s.max() - s.min())


@dataclass
class MismatchReport:
    directions: tuple
    q_norm: float
    low_mismatch: float  # X-norm of the low-frequency part of q + B(g, g)

    @property
    def relative(self) -> float:
        return self.low_mismatch / self.q_norm if self.q_norm else 0.0


def mismatch_probe(q: np.ndarray, lam: int, mu: float, directions, C0: float = 2.0,
                   chi: float | None = None) -> MismatchReport:
    """Single-time cancellation test: build blocks for a smooth q and measure P_{<2 mu}(q + B(g, g)).

    q: half-layout coefficients of a low-frequency residual on a small grid.
    """
    from . import scheme

    q = np.asarray(q)[None]
    qx = float(sp.xnorm_coeffs(q, 2)[0])
    chi = 2.0 * qx if chi is None else chi
    amp = scheme.build_amplitudes(np.repeat(q, 1, axis=0), np.array([chi]), lam, mu, C0)
    bc = scheme.BlockConfig(directions[0], directions[1], C0)
    blk = scheme.build_block(amp, lam, mu, bc)
    Nq = scheme.residual_grid(blk.band)
    g = blk.coeffs(Nq, slice(None))
    b = scheme.nonlinear_coeffs(g)
    tot = sp.resize(q, Nq) + b
    low = sp.freq_truncate_coeffs(tot, 2 * mu)
    Ns = sp.fast_even_size(4 * mu + 4)
    return MismatchReport(tuple(map(tuple, directions)), qx, float(sp.xnorm_coeffs(sp.resize(low, Ns), 2)[0]))


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))
