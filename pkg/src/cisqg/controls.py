"""Planner for the double-exponential control sequences and their side conditions."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

MAX_DIGITS = 4000  # exact integers are kept up to this many decimal digits


class PlannerError(ValueError):
    pass


@dataclass
class PlannerInput:
    alpha: float
    kappa: float
    gamma: float
    m: int = 2
    nu: float = 1.0
    C: float = 2.0
    Cz: float = 0.0
    C0: float = 2.0
    C_start: float = 1.0

    def validate(self):
        if not self.alpha > 0:
            raise PlannerError("alpha must be positive")
        if self.m < 1:
            raise PlannerError("moment index m must be >= 1")
        if self.C0 < 2:
            raise PlannerError("C0 must be at least 2")
        if self.C_start < 1:
            raise PlannerError("C_start must be at least 1")
        if self.Cz < 0:
            raise PlannerError("Cz must be nonnegative")
        if not self.C > 1:
            raise PlannerError("the constant C must exceed 1")


def smallest_b(alpha: float) -> int:
    """Smallest integer strictly above 1 + 1/alpha."""
    x = 1.0 + 1.0 / alpha
    b = math.floor(x) + 1
    return int(b)


def beta_bounds(alpha: float, kappa: float, gamma: float, b: int) -> dict:
    """Strict upper bounds on beta (the sixth coincides with the third)."""
    eta3 = b / (2 * b - 1)
    return {
        "eta1": (alpha * (b - 1) - 1) / b,
        "eta2": (kappa - 0.5) / b,
        "eta3": eta3,
        "eta4": (4 * b / (4 * b - 1)) * (1.5 - gamma),
        "eta5": (b - 1) / (2 * b - 1),
        "eta6": eta3,
    }


def rate_exponents(alpha, kappa, gamma, b, beta) -> list:
    return [
        (1 - b) * (1 - beta),
        1 - alpha * (b - 1) + beta * b,
        0.5 - kappa + beta * b,
        -b / 2 + b * beta - beta / 2,
        b * (gamma - 1.5 + beta) - beta / 4,
        0.5 - b / 2 + b * beta - beta / 2,
    ]


def varsigma(alpha, kappa, gamma, b, beta) -> float:
    return -max(rate_exponents(alpha, kappa, gamma, b, beta))


def lattice_min_a(b: int) -> int:
    """Smallest a >= 2 with a^b >= 48, a^(1+b) >= 100 and a^b >= 9."""
    a = 2
    while not (a**b >= 48 and a ** (1 + b) >= 100 and a**b >= 9):
        a += 1
    return a


def closing_lhs(a: int, C: float, nu: float, b: int, vs: float) -> float:
    la = math.log(a)
    return C * la * (10 + abs(nu)) * (4 * b) ** 2 * math.exp(-vs * la)


def closing_min_a(C: float, nu: float, b: int, vs: float) -> int:
    """Smallest integer a >= 2 with C log(a) (10+|nu|) (4b)^2 a^-vs <= 1."""
    if closing_lhs(2, C, nu, b, vs) <= 1:
        return 2
    # the left side increases up to a = e^(1/vs) and decreases afterwards
    lo = max(2, int(math.exp(min(1.0 / vs, 700))) if 1.0 / vs < 700 else 2)
    if 1.0 / vs >= 700:
        lo = _int_exp(1.0 / vs)
    hi = max(lo, 2) * 2
    while closing_lhs(hi, C, nu, b, vs) > 1:
        hi *= hi if hi < 2**64 else 2**64
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if closing_lhs(mid, C, nu, b, vs) <= 1:
            hi = mid
        else:
            lo = mid
    return hi


def _int_exp(x: float) -> int:
    # integer near exp(x) for large x without float overflow
    k = int(x / math.log(2))
    return 2**k


def monotone_min_a(b: int, vs: float) -> int:
    """Smallest a for which n -> (4b)^(2n) a^(-b^(n-1) vs) is non-increasing on n >= 1.

    The worst ratio is n = 1 -> 2, giving a^(vs (b-1)) >= (4b)^2.
    """
    x = 2 * math.log(4 * b) / (vs * (b - 1))
    a = _int_exp(x) if x > 700 else max(2, int(math.floor(math.exp(x))))
    while math.log(a) * vs * (b - 1) < 2 * math.log(4 * b) - 1e-15:
        a += max(1, a // 2**40)
    while a > 2 and math.log(a - 1) * vs * (b - 1) >= 2 * math.log(4 * b):
        a -= 1
    return a


@dataclass
class Level:
    n: int
    lam: int | None  # exact when representable
    log_lam: float
    r: float
    log_r: float
    ell: float
    log_mu: float | None
    mu: float | None

    def feasible(self, N: int) -> bool:
        """5 lambda + mu within the grid Nyquist N/2."""
        if self.lam is None or self.mu is None:
            return False if self.n > 0 else self.lam is not None and self.lam <= N // 2
        return 5 * self.lam + self.mu <= N / 2


@dataclass
class ControlParams:
    a: int
    b: int
    beta: float
    varsigma: float
    mode: str
    C_start: float = 1.0
    Cz: float = 0.0
    C0: float = 2.0
    nu: float = 1.0
    C: float = 2.0
    alpha: float = 0.5
    kappa: float = 0.6
    gamma: float = 1.0
    m: int = 2
    lattice_a: int | None = None
    closing_a: int | None = None
    a0: int | None = None
    bounds: dict = field(default_factory=dict)

    def with_calibration(self, C_start=None, Cz=None) -> "ControlParams":
        d = asdict(self)
        if C_start is not None:
            d["C_start"] = float(C_start)
        if Cz is not None:
            d["Cz"] = float(Cz)
        return ControlParams(**d)

    def levels(self, n_max: int) -> list:
        return sequences(self, n_max)

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("a", "lattice_a", "closing_a", "a0"):
            v = d[key]
            if v is not None and v.bit_length() > 60:
                d[key] = {"log": math.log(v)}
        return d


def plan(inp: PlannerInput, mode: str = "strict", a: int | None = None, b: int | None = None,
         beta: float | None = None) -> ControlParams:
    """Choose (a, b, beta).  Demo mode accepts user values and skips the closing inequality."""
    inp.validate()
    if mode not in ("strict", "demo"):
        raise PlannerError("mode must be strict or demo")
    b_auto = smallest_b(inp.alpha)
    b_use = int(b) if (mode == "demo" and b is not None) else b_auto
    bounds = beta_bounds(inp.alpha, inp.kappa, inp.gamma, b_use)
    if mode == "strict":
        if inp.kappa <= 0.5 or inp.gamma >= 1.5 or min(bounds.values()) <= 0:
            raise PlannerError("no admissible β")
        beta_use = 0.5 * min(bounds.values())
    else:
        if beta is None:
            if min(bounds.values()) <= 0:
                raise PlannerError("no admissible β")
            beta_use = 0.5 * min(bounds.values())
        else:
            beta_use = float(beta)
    vs = varsigma(inp.alpha, inp.kappa, inp.gamma, b_use, beta_use)
    lat = lattice_min_a(b_use)
    clo = a0 = None
    if vs > 0:
        clo = closing_min_a(inp.C, inp.nu, b_use, vs)
        a0 = monotone_min_a(b_use, vs)
    if mode == "strict":
        if vs <= 0:
            raise PlannerError("no admissible β")
        a_use = max(lat, clo, a0)
    else:
        a_use = int(a) if a is not None else lat
    return ControlParams(a=a_use, b=b_use, beta=beta_use, varsigma=vs, mode=mode,
                         C_start=inp.C_start, Cz=inp.Cz, C0=inp.C0, nu=inp.nu, C=inp.C,
                         alpha=inp.alpha, kappa=inp.kappa, gamma=inp.gamma, m=inp.m,
                         lattice_a=lat, closing_a=clo, a0=a0, bounds=bounds)


def _exact_power(a: int, e: int) -> int | None:
    if e * math.log10(a) > MAX_DIGITS:
        return None
    return a**e


def sequences(cp: ControlParams, n_max: int) -> list:
    """(lambda_n, r_n, ell_n, mu_n) for n = 0..n_max."""
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    la = math.log(cp.a)
    log_r0 = math.log(cp.C_start * (cp.Cz**2 + 1))
    out = []
    for n in range(n_max + 1):
        e = cp.b**n
        lam = _exact_power(cp.a, e)
        log_lam = e * la
        log_r = log_r0 + cp.beta * (1 - e) * la
        r = math.exp(log_r)
        ell = math.exp(-log_lam) if log_lam < 745 else 0.0
        if n == 0:
            log_mu = mu = None
        else:
            log_mu = 0.5 * (cp.b ** (n - 1) + e) * la
            mu = math.exp(log_mu) if log_mu < 709 else None
        out.append(Level(n, lam, log_lam, r, log_r, ell, log_mu, mu))
    return out


def feasibility_table(cp: ControlParams, n_max: int, N: int) -> list:
    return [(lv.n, lv.feasible(N) if lv.n > 0 else True) for lv in sequences(cp, n_max)]


@dataclass
class ConditionReport:
    rows: list  # (name, n, holds)
    strict_ok: bool
    closing_value: float

    def failed(self) -> list:
        return [r for r in self.rows if not r[2]]

    def as_dict(self) -> dict:
        return {"rows": [list(r) for r in self.rows], "strict_ok": self.strict_ok,
                "closing_value": self.closing_value}


def _ge_log(log_lhs: float, log_rhs: float) -> bool:
    return log_lhs >= log_rhs - 1e-12


def check_conditions(cp: ControlParams, n_max: int) -> ConditionReport:
    """Per-level side conditions, lattice conditions, beta bounds and the closing inequality."""
    seq = sequences(cp, n_max + 1)
    rows = []
    la = math.log(cp.a)
    for n in range(1, n_max + 1):
        lv, nx = seq[n], seq[n + 1]
        rows.append(("R1", n, _ge_log(lv.log_lam, lv.log_mu)))
        rows.append(("R2", n, lv.log_lam >= 0))
        rows.append(("R3_integer", n, lv.lam is not None or cp.a == int(cp.a)))
        rows.append(("R3_12lam_le_4mu", n, _ge_log(math.log(4) + nx.log_mu, math.log(12) + lv.log_lam)))
        rows.append(("R3_mu_ge_10", n, _ge_log(lv.log_mu, math.log(10))))
        rows.append(("R3_48lam_le_lam", n, _ge_log(nx.log_lam, math.log(48) + lv.log_lam)))
    rows.append(("A_9_le_a^b", 0, _ge_log(cp.b * la, math.log(9))))
    rows.append(("A_100_le_a^(1+b)", 0, _ge_log((1 + cp.b) * la, math.log(100))))
    rows.append(("A_48_le_a^b", 0, _ge_log(cp.b * la, math.log(48))))
    bounds = beta_bounds(cp.alpha, cp.kappa, cp.gamma, cp.b)
    for name, val in bounds.items():
        rows.append((name, 0, cp.beta < val))
    rows.append(("b_gt_1+1/alpha", 0, cp.b > 1 + 1 / cp.alpha))
    vs = varsigma(cp.alpha, cp.kappa, cp.gamma, cp.b, cp.beta)
    closing = math.log(cp.C) + math.log(la) + math.log(10 + abs(cp.nu)) + 2 * math.log(4 * cp.b) - vs * la
    closing_val = math.exp(closing) if closing < 700 else math.inf
    rows.append(("varsigma_positive", 0, vs > 0))
    rows.append(("closing", 0, closing <= 1e-12))
    if vs > 0:
        mono = la * vs * (cp.b - 1) >= 2 * math.log(4 * cp.b) - 1e-12
    else:
        mono = False
    rows.append(("a_ge_a0", 0, mono))
    ok = all(r[2] for r in rows)
    return ConditionReport(rows, ok, closing_val)
