"""The iteration: building blocks, amplitudes, updates and residuals.

g_{<=n} is kept as a list of modulated blocks  a(t, x) cos(K . x)  with band-limited
amplitudes stored on a small grid; the full spectrum is obtained by shifting the
amplitude coefficients to +-K.  Residuals are evaluated on a product grid large
enough to hold every product mode, so no part of the quadratic term is discarded.

Under the Fourier convention of `spectral` the residual of an iterate is

    q = -Lambda^-1 d_t g  +  Delta^-1 div[ grad_perp(u) Lambda u ]  -  nu Lambda^(gamma-1) g,

with u = g + z_n and the mean of the vector field removed before inversion.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import controls
from . import spectral as sp
from . import timeline as tl
from .noise import NoisePath

DERIVED_DIRECTIONS = ((0.6, 0.8), (1.0, 0.0))
ALTERNATE_DIRECTIONS = ((0.6, 0.8), (0.8, 0.6))


class InfeasibleLevel(RuntimeError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    l1: tuple = DERIVED_DIRECTIONS[0]
    l2: tuple = DERIVED_DIRECTIONS[1]
    C0: float = 2.0

    def __post_init__(self):
        for l in (self.l1, self.l2):
            if abs(math.hypot(*l) - 1.0) > 1e-12:
                raise ValueError("carrier directions must be unit vectors")
        if self.C0 < 2:
            raise ValueError("C0 must be at least 2")

    @property
    def directions(self) -> tuple:
        return (self.l1, self.l2)

    def carriers(self, lam: int) -> list:
        out = []
        for l in self.directions:
            c = (5 * lam * l[0], 5 * lam * l[1])
            ci = (int(round(c[0])), int(round(c[1])))
            if abs(c[0] - ci[0]) > 1e-9 or abs(c[1] - ci[1]) > 1e-9:
                raise ValueError("5 lambda l_j is not a lattice point")
            out.append(ci)
        return out


def pow2_at_least(x: float, lo: int = 8) -> int:
    n = lo
    while n < x:
        n *= 2
    return n


def amp_grid(mu: float) -> int:
    """Smallest power-of-two grid whose Nyquist exceeds mu."""
    return pow2_at_least(2 * math.floor(mu) + 2)


def residual_grid(band: float) -> int:
    """Smallest even FFT-friendly grid holding products of fields with |k| <= band untruncated."""
    return sp.fast_even_size(int(math.floor(4 * band)) + 2)


# ---------------------------------------------------------------------------
# blocks


@functools.lru_cache(maxsize=256)
def _placement(carrier: tuple, W: int, mu: float, N: int):
    """Index maps for g_hat(p -+ K) += a_hat(p)/2 over |p| < mu, restricted to the half layout."""
    r = np.arange(-(W // 2) + 1, W // 2)
    p1, p2 = np.meshgrid(r, r, indexing="ij")
    p1, p2 = p1.ravel(), p2.ravel()
    inside = p1 * p1 + p2 * p2 < mu * mu
    p1, p2 = p1[inside], p2[inside]
    src_rows, src_cols, src_conj, tgt_rows, tgt_cols = [], [], [], [], []
    for s in (1, -1):
        k1, k2 = p1 + s * carrier[0], p2 + s * carrier[1]
        keep = k2 >= 0
        if np.any(np.abs(k1[keep]) >= N // 2) or np.any(k2[keep] >= N // 2):
            raise InfeasibleLevel("level infeasible at this grid")
        q1, q2 = p1[keep], p2[keep]
        neg = q2 < 0
        src_rows.append(np.where(neg, -q1, q1) % W)
        src_cols.append(np.abs(q2))
        src_conj.append(neg)
        tgt_rows.append(k1[keep] % N)
        tgt_cols.append(k2[keep])
    cat = np.concatenate
    return cat(src_rows), cat(src_cols), cat(src_conj), cat(tgt_rows), cat(tgt_cols)


@dataclass
class Block:
    """a_j(t, x) cos(K_j . x), j = 1, 2; amps[j] has shape (T, W, W//2+1)."""

    level: int
    lam: int
    mu: float
    carriers: tuple
    amps: tuple

    @property
    def band(self) -> float:
        return 5 * self.lam + self.mu

    @property
    def W(self) -> int:
        return self.amps[0].shape[1]

    def mollified(self, m: tl.Mollifier, dt: float) -> "Block":
        w = m.weights(dt)
        return Block(self.level, self.lam, self.mu, self.carriers,
                     tuple(tl.causal_filter(a, w) for a in self.amps))

    def derivative_amps(self, dt: float) -> tuple:
        return tuple(tl.fd4(a, dt) for a in self.amps)

    def place(self, out: np.ndarray, amps: tuple, frames) -> None:
        """Add the block spectrum for `frames` into out (F, N, N//2+1)."""
        N = out.shape[-2]
        for K, a in zip(self.carriers, amps):
            sr, sc, sconj, tr, tc = _placement(K, self.W, float(self.mu), N)
            vals = a[frames][:, sr, sc]
            vals = np.where(sconj, np.conj(vals), vals)
            out[:, tr, tc] += 0.5 * vals

    def coeffs(self, N: int, frames=slice(None)) -> np.ndarray:
        F = len(np.arange(self.amps[0].shape[0])[frames])
        out = np.zeros((F, N, N // 2 + 1), dtype=complex)
        self.place(out, self.amps, frames)
        return out

    def field(self, grid: tl.TimeGrid, N: int) -> tl.SpaceTimeField:
        return tl.SpaceTimeField(grid, self.coeffs(N))


@dataclass
class BlockSum:
    blocks: list = field(default_factory=list)

    @property
    def band(self) -> float:
        return max((b.band for b in self.blocks), default=0.0)

    def mollified(self, m: tl.Mollifier, dt: float) -> "BlockSum":
        return BlockSum([b.mollified(m, dt) for b in self.blocks])

    def coeffs(self, N: int, frames, T: int) -> np.ndarray:
        F = len(np.arange(T)[frames])
        out = np.zeros((F, N, N // 2 + 1), dtype=complex)
        for b in self.blocks:
            b.place(out, b.amps, frames)
        return out

    def dcoeffs(self, N: int, frames, T: int, dt: float, cache: dict | None = None) -> np.ndarray:
        F = len(np.arange(T)[frames])
        out = np.zeros((F, N, N // 2 + 1), dtype=complex)
        for i, b in enumerate(self.blocks):
            if cache is not None and i in cache:
                d = cache[i]
            else:
                d = b.derivative_amps(dt)
                if cache is not None:
                    cache[i] = d
            b.place(out, d, frames)
        return out


@dataclass
class AmplitudeResult:
    amps: tuple
    clamped: int
    points: int
    max_ratio: float  # max |R_j^o q_ell| / chi

    @property
    def clamp_fraction(self) -> float:
        return self.clamped / max(self.points, 1)


def build_amplitudes(q_ell: np.ndarray, chi: np.ndarray, lam: int, mu: float, C0: float,
                     Na: int | None = None, tol: float = 1e-9, chunk: int = 32) -> AmplitudeResult:
    """a_j = 2 sqrt(chi / (5 lam)) P_{<= mu} sqrt(C0 + R_j^o q_ell / chi), j = 1, 2.

    q_ell: (T, Nq, Nq//2+1) mollified residual; chi: (T,) positive.  The radicand is
    evaluated on an Na grid; values below C0 - 1 - tol are clamped to C0 - 1 and counted.
    """
    T, Nq = q_ell.shape[0], q_ell.shape[1]
    if Na is None:
        Na = min(max(pow2_at_least(2 * Nq), 32), 4 * Nq)
    W = amp_grid(mu)
    chi = np.asarray(chi, dtype=float)
    if np.any(chi <= 0):
        raise ValueError("chi must be positive")
    cut = sp.bump(sp.grid(Na).kabs / float(mu))
    scale = 2.0 * np.sqrt(chi / (5.0 * lam))
    amps = []
    clamped = 0
    max_ratio = 0.0
    for j in (1, 2):
        sym = sp.riesz_odd(j).values(Nq)
        out = np.empty((T, W, W // 2 + 1), dtype=complex)
        for s in range(0, T, chunk):
            e = min(T, s + chunk)
            ratio = sp.inverse(q_ell[s:e] * sym, Na) / chi[s:e, None, None]
            max_ratio = max(max_ratio, float(np.max(np.abs(ratio))) if ratio.size else 0.0)
            rad = C0 + ratio
            low = rad < C0 - 1.0 - tol
            clamped += int(np.count_nonzero(low))
            rad[low] = C0 - 1.0
            c = sp.forward(np.sqrt(rad)) * cut
            out[s:e] = sp.resize(c, W) * scale[s:e, None, None]
        amps.append(out)
    return AmplitudeResult(tuple(amps), clamped, 2 * T * Na * Na, max_ratio)


def build_block(amps: AmplitudeResult | tuple, lam: int, mu: float, bc: BlockConfig, level: int = 0,
                N: int | None = None) -> Block:
    a = amps.amps if isinstance(amps, AmplitudeResult) else tuple(amps)
    blk = Block(level, int(lam), float(mu), tuple(bc.carriers(lam)), a)
    if N is not None and blk.band > N / 2:
        raise InfeasibleLevel("level infeasible at this grid")
    return blk


# ---------------------------------------------------------------------------
# residual


def nonlinear_coeffs(u: np.ndarray) -> np.ndarray:
    """Delta^-1 div[grad_perp(u) Lambda u] for coefficient stacks, computed on the input grid.

    The input band must stay below a quarter of the grid so the product is exact.
    """
    g = sp.grid(u.shape[-2])
    perp1 = sp.inverse(1j * g.k2 * u)
    perp2 = sp.inverse(-1j * g.k1 * u)
    lam_u = sp.inverse(g.kabs * u)
    v1 = sp.forward(perp1 * lam_u)
    v2 = sp.forward(perp2 * lam_u)
    return sp.invert_gradient_coeffs(v1, v2)


def time_term_coeffs(dg: np.ndarray) -> np.ndarray:
    return -dg * sp.lambda_pow(-1.0).values(dg.shape[-2])


def dissipation_coeffs(g: np.ndarray, nu: float, gamma: float) -> np.ndarray:
    return -nu * g * sp.lambda_pow(gamma - 1.0).values(g.shape[-2])


def residual_parts(g: np.ndarray, dg: np.ndarray, zn: np.ndarray, nu: float, gamma: float) -> dict:
    """Separate residual contributions on a common grid."""
    return {
        "time": time_term_coeffs(dg),
        "nonlinear": nonlinear_coeffs(g + zn),
        "dissipation": dissipation_coeffs(g, nu, gamma),
    }


def residual_coeffs(g: np.ndarray, dg: np.ndarray, zn: np.ndarray, nu: float, gamma: float) -> np.ndarray:
    q = nonlinear_coeffs(g + zn) + time_term_coeffs(dg) + dissipation_coeffs(g, nu, gamma)
    q[..., 0, 0] = 0.0
    return q


def compute_residual(g_le: tl.SpaceTimeField, z_n: tl.SpaceTimeField, nu: float = 1.0, gamma: float = 1.0,
                     dg: tl.SpaceTimeField | None = None, Nq: int | None = None) -> tl.SpaceTimeField:
    """Residual of a sampled iterate; returned on the product grid Nq (default 2N)."""
    if g_le.grid.count < 5:
        raise ValueError("residual needs at least 5 time frames")
    N = g_le.N
    Nq = 2 * N if Nq is None else Nq
    if dg is None:
        dg = tl.time_derivative(g_le, "fd4")
    g = sp.resize(g_le.coeffs, Nq)
    d = sp.resize(dg.coeffs, Nq)
    z = sp.resize(z_n.coeffs, Nq)
    return tl.SpaceTimeField(g_le.grid, residual_coeffs(g, d, z, nu, gamma))


# ---------------------------------------------------------------------------
# iteration


@dataclass
class SchemeConfig:
    N: int
    levels: int = 1
    block: BlockConfig = field(default_factory=BlockConfig)
    nu: float = 1.0
    gamma: float = 1.0
    eval_stride: int = 1
    oversample: int | None = None  # sup-norm oversampling; None picks 2 up to 512 points, else 1
    clamp_tol: float = 1e-9
    chunk: int = 16
    parts: bool = False

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if self.eval_stride < 1:
            raise ValueError("eval_stride must be >= 1")

    def sup_oversample(self, Nq: int) -> int:
        if self.oversample is not None:
            return self.oversample
        return 2 if Nq <= 512 else 1


@dataclass
class LevelRecord:
    n: int
    lam: int
    mu: float | None
    ell: float
    r: float
    Nq: int
    frames: np.ndarray
    xnorm: np.ndarray
    chi: np.ndarray | None = None
    clamped: int = 0
    clamp_points: int = 0
    max_ratio: float = 0.0
    amp_sup: np.ndarray | None = None  # (T, 2) sup of the new amplitudes
    parts: dict = field(default_factory=dict)  # X-norm per evaluated frame of each contribution

    @property
    def sup_xnorm(self) -> float:
        return float(np.max(self.xnorm)) if len(self.xnorm) else 0.0

    @property
    def clamp_fraction(self) -> float:
        return self.clamped / max(self.clamp_points, 1)


@dataclass
class IterationState:
    level: int
    grid: tl.TimeGrid
    blocks: BlockSum
    q: np.ndarray | None  # (F, Nq, Nq//2+1) at record.frames
    z_trunc: NoisePath
    record: LevelRecord
    new_block: Block | None = None

    def g_coeffs(self, N: int, frames=slice(None)) -> np.ndarray:
        return self.blocks.coeffs(N, frames, self.grid.count)

    def g_field(self, N: int) -> tl.SpaceTimeField:
        return tl.SpaceTimeField(self.grid, self.g_coeffs(N))

    def q_field(self) -> tl.SpaceTimeField:
        if len(self.record.frames) != self.grid.count:
            raise ValueError("residual was evaluated on a frame subset")
        return tl.SpaceTimeField(self.grid, self.q)


def time_grid_for(cp: controls.ControlParams, levels: int, T: float = 1.0, dt: float | None = None) -> tl.TimeGrid:
    """Uniform grid on [0, T] with dt = min ell_n / 16 over the levels run (or the given dt)."""
    if dt is None:
        seq = controls.sequences(cp, max(levels, 1))
        dt = min(lv.ell for lv in seq[1 : levels + 1]) / 16.0 if levels >= 1 else seq[0].ell / 16.0
    return tl.TimeGrid.covering(T, dt)


def _eval_frames(T: int, stride: int) -> np.ndarray:
    fr = np.arange(0, T, stride)
    if fr[-1] != T - 1:
        fr = np.append(fr, T - 1)
    return fr


def _xnorm_frames(q: np.ndarray, oversample: int, chunk: int) -> np.ndarray:
    out = np.empty(q.shape[0])
    for s in range(0, q.shape[0], chunk):
        out[s : s + chunk] = sp.xnorm_coeffs(q[s : s + chunk], oversample)
    return out


def init(z: NoisePath, cp: controls.ControlParams, cfg: SchemeConfig, all_frames: bool | None = None) -> IterationState:
    """g_{<=0} = 0 and q_0 = Delta^-1 div[grad_perp(z_0) Lambda z_0], z_0 = P_{<= lambda_0} z."""
    seq = controls.sequences(cp, 0)
    lam0 = seq[0].lam
    zt = z.truncated(lam0)
    Nq = residual_grid(lam0)
    T = z.grid.count
    if all_frames is None:
        all_frames = cfg.levels >= 1
    frames = np.arange(T) if all_frames else _eval_frames(T, cfg.eval_stride)
    q = np.empty((len(frames), Nq, Nq // 2 + 1), dtype=complex)
    for s in range(0, len(frames), cfg.chunk):
        fr = frames[s : s + cfg.chunk]
        q[s : s + len(fr)] = nonlinear_coeffs(zt.coeffs(Nq, frames=fr))
    q[..., 0, 0] = 0.0
    xn = _xnorm_frames(q, cfg.sup_oversample(Nq), cfg.chunk)
    rec = LevelRecord(0, lam0, None, seq[0].ell, seq[0].r, Nq, frames, xn)
    return IterationState(0, z.grid, BlockSum(), q, zt, rec)


def step(state: IterationState, cp: controls.ControlParams, cfg: SchemeConfig, z: NoisePath,
         all_frames: bool | None = None, residual: bool = True) -> IterationState:
    """One update: mollify, build amplitudes and the new block, recompute the residual.

    With residual=False only the blocks are built; the record then holds no frames.
    """
    n = state.level + 1
    seq = controls.sequences(cp, n)
    prev, lv = seq[n - 1], seq[n]
    if lv.lam is None or lv.mu is None or 5 * lv.lam + lv.mu > cfg.N / 2:
        raise InfeasibleLevel("level infeasible at this grid")
    grid = state.grid
    T, dt = grid.count, grid.dt
    if len(state.record.frames) != T:
        raise ValueError("previous residual must be available at every frame")
    moll = tl.Mollifier(lv.ell)
    w = moll.weights(dt)
    chi = tl.causal_filter(state.record.xnorm, w) + prev.r
    q_ell = tl.causal_filter(state.q, w)
    amp = build_amplitudes(q_ell, chi, lv.lam, lv.mu, cfg.block.C0, tol=cfg.clamp_tol, chunk=cfg.chunk)
    new = build_block(amp, lv.lam, lv.mu, cfg.block, level=n, N=cfg.N)
    blocks = BlockSum(state.blocks.mollified(moll, dt).blocks + [new])
    zt = z.truncated(lv.lam)
    band = max(blocks.band, float(lv.lam))
    Nq = residual_grid(band)
    if all_frames is None:
        all_frames = n < cfg.levels
    frames = np.arange(T) if all_frames else _eval_frames(T, cfg.eval_stride)
    if not residual:
        frames = np.arange(0)
    q = np.empty((len(frames), Nq, Nq // 2 + 1), dtype=complex)
    parts = {k: np.empty(len(frames)) for k in ("time", "nonlinear", "dissipation", "mismatch")} if cfg.parts else {}
    dcache: dict = {}
    for s in range(0, len(frames), cfg.chunk):
        fr = frames[s : s + cfg.chunk]
        g = blocks.coeffs(Nq, fr, T)
        dg = blocks.dcoeffs(Nq, fr, T, dt, dcache)
        zn = zt.coeffs(Nq, frames=fr)
        if cfg.parts:
            pieces = residual_parts(g, dg, zn, cfg.nu, cfg.gamma)
            qc = pieces["time"] + pieces["nonlinear"] + pieces["dissipation"]
            qc[..., 0, 0] = 0.0
            gn = new.coeffs(Nq, fr)
            pieces["mismatch"] = sp.resize(q_ell[fr], Nq) + nonlinear_coeffs(gn)
            for k, v in pieces.items():
                parts[k][s : s + len(fr)] = _xnorm_frames(v, cfg.sup_oversample(Nq), cfg.chunk)
        else:
            qc = residual_coeffs(g, dg, zn, cfg.nu, cfg.gamma)
        q[s : s + len(fr)] = qc
    xn = _xnorm_frames(q, cfg.sup_oversample(Nq), cfg.chunk)
    if not residual:
        q = None
    asup = np.stack([sp.linf_coeffs(a, 2) for a in amp.amps], axis=1)
    rec = LevelRecord(n, lv.lam, lv.mu, lv.ell, lv.r, Nq, frames, xn, chi, amp.clamped, amp.points,
                      amp.max_ratio, asup, parts)
    return IterationState(n, grid, blocks, q, zt, rec, new)


def run(z: NoisePath, cp: controls.ControlParams, cfg: SchemeConfig, last_residual: bool = True) -> list:
    """States for levels 0..cfg.levels; residuals at every frame except on the last level."""
    states = [init(z, cp, cfg)]
    for n in range(cfg.levels):
        states.append(step(states[-1], cp, cfg, z, residual=last_residual or n + 1 < cfg.levels))
    return states


def feasible_levels(cp: controls.ControlParams, N: int, n_max: int) -> list:
    return [(lv.n, lv.n == 0 or lv.feasible(N)) for lv in controls.sequences(cp, n_max)]
