"""Lie transforms, KAM steps, and the inner and outer iterations with their schedules."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .algebra import (
    DomainRadii,
    LatticeConfig,
    TFPoly,
    dumps,
    poisson_bracket,
    split_low_high,
    vf_weighted_norm,
)
from .errors import ConfigurationError, DivergenceWarning, SmallDivisorViolation
from .homology import StepParams, solve_homological
from .lattice import BlockDecomposition, LatticeMatrix, NormalForm, build_blocks
from .melnikov import ParameterGrid, carve, check_conditions

__all__ = [
    "InnerSchedule",
    "OuterSchedule",
    "KamSettings",
    "KamResult",
    "LieSeries",
    "lie_series",
    "lie_transform",
    "kam_step",
    "inner_loop",
    "outer_iterate",
    "compose_transform",
]

_BASEL = math.pi**2 / 6.0


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------


def _log_inv(eps: float) -> float:
    return math.inf if eps <= 0 else math.log(1.0 / eps)


@dataclass(frozen=True)
class InnerSchedule:
    """Normal-form sub-steps of one outer step.

    ``n = floor(log 1/eps)``; for ``1 <= j <= n``
    ``eps_j = (eps / kappa^20) eps_{j-1}``, ``gamma_j``, ``rho_j`` and
    ``sigma_j`` interpolate linearly to their ``+`` values, ``mu_j = sigma_j^2``,
    ``Lambda_j = Lambda_{j-1} + d_Delta + 30`` with
    ``Lambda_0 = cte max(Lambda, d_Delta^2, d_Delta'^2)``, and
    ``Delta' = 80 (log 1/eps)^2 / min(gamma - gamma_+, rho - rho_+)``.
    """

    eps: float
    kappa: float
    gamma: float
    gamma_plus: float
    rho: float
    rho_plus: float
    sigma: float
    sigma_plus: float
    mu: float
    Lambda: float = 1.0
    d_delta: float = 0.0
    d_delta_prime: float = 0.0
    cte: float = 1.0

    def __post_init__(self):
        if not (0 < self.gamma_plus < self.gamma and 0 < self.rho_plus < self.rho and 0 < self.sigma_plus < self.sigma):
            raise ConfigurationError("inner schedule needs 0 < x_+ < x for gamma, rho and sigma")
        if not 0 < self.kappa < 1:
            raise ConfigurationError("kappa must lie in (0, 1)")

    @property
    def n(self) -> int:
        return max(0, int(math.floor(_log_inv(self.eps)))) if self.eps > 0 else 0

    @property
    def delta_prime(self) -> float:
        return 80.0 * _log_inv(self.eps) ** 2 / min(self.gamma - self.gamma_plus, self.rho - self.rho_plus)

    def eps_j(self, j: int) -> float:
        return self.eps * (self.eps / self.kappa**20) ** j

    def _interp(self, a: float, b: float, j: int) -> float:
        return a if self.n == 0 else a - j * (a - b) / self.n

    def gamma_j(self, j: int) -> float:
        return self._interp(self.gamma, self.gamma_plus, j)

    def rho_j(self, j: int) -> float:
        return self._interp(self.rho, self.rho_plus, j)

    def sigma_j(self, j: int) -> float:
        return self._interp(self.sigma, self.sigma_plus, j)

    def mu_j(self, j: int) -> float:
        return self.mu if j == 0 else self.sigma_j(j) ** 2

    def Lambda_j(self, j: int) -> float:
        base = self.cte * max(self.Lambda, self.d_delta**2, self.d_delta_prime**2)
        return base + j * (self.d_delta + 30.0)

    def radii(self, j: int) -> DomainRadii:
        return DomainRadii(self.rho_j(j), self.mu_j(j), self.sigma_j(j), min(self.gamma_j(j), 0.999))

    def table(self) -> list:
        return [
            {
                "j": j,
                "eps": self.eps_j(j),
                "gamma": self.gamma_j(j),
                "rho": self.rho_j(j),
                "sigma": self.sigma_j(j),
                "mu": self.mu_j(j),
                "Lambda": self.Lambda_j(j),
            }
            for j in range(self.n + 1)
        ]


class OuterSchedule:
    """Closed-form outer sequences.

    ``eps_m = exp(-(log 1/eps_{m-1})^2 / 20)``,
    ``theta_m = sum_{j<=m} j^-2 / (2 sum_j j^-2)``,
    ``rho_m = (1 - theta_m) rho``, ``sigma_m = (1 - theta_m) sigma``,
    ``mu_m = sigma_m^2``, ``gamma_m = 1 / d_{Delta_m}``,
    ``Delta_m = 80 (log 1/eps_{m-1})^2 / min(gamma_{m-1}, rho_{m-1} - rho_m)``,
    ``Lambda_m = cte d_{Delta_m}^2`` and ``kappa_m^20 = eps_m^(1/20)``.

    Parameters
    ----------
    eps, rho, sigma, mu, gamma : float
        Initial size and radii.
    delta0 : float
        Initial block scale.
    diameter : callable, optional
        Map ``Delta -> d_Delta``; defaults to the identity.
    cte : float
    """

    def __init__(self, eps, rho, sigma, mu, gamma, delta0, diameter=None, cte: float = 1.0):
        if not 0 < eps < 1:
            raise ConfigurationError("eps must lie in (0, 1)")
        self.eps0 = float(eps)
        self.rho0, self.sigma0, self.mu0, self.gamma_in = float(rho), float(sigma), float(mu), float(gamma)
        self.delta0 = float(delta0)
        self.diameter = diameter or (lambda D: D)
        self.cte = float(cte)
        self._logs = [_log_inv(self.eps0)]
        self._Delta = [self.delta0]
        d0 = self.diameter(self.delta0)
        self._gamma = [min(self.gamma_in, 1.0 / d0) if d0 > 0 else self.gamma_in]
        self._basel = [0.0]

    # eps is carried as log(1/eps) so that the recursion never underflows
    def log_inv_eps(self, m: int) -> float:
        while len(self._logs) <= m:
            L = self._logs[-1]
            self._logs.append(L * L / 20.0)
        return self._logs[m]

    def eps(self, m: int) -> float:
        return math.exp(-self.log_inv_eps(m))

    def theta(self, m: int) -> float:
        while len(self._basel) <= m:
            j = len(self._basel)
            self._basel.append(self._basel[-1] + 1.0 / (j * j))
        return self._basel[m] / (2.0 * _BASEL)

    def rho(self, m: int) -> float:
        return self.rho0 if m == 0 else (1.0 - self.theta(m)) * self.rho0

    def sigma(self, m: int) -> float:
        return self.sigma0 if m == 0 else (1.0 - self.theta(m)) * self.sigma0

    def mu(self, m: int) -> float:
        return self.mu0 if m == 0 else self.sigma(m) ** 2

    def Delta(self, m: int) -> float:
        while len(self._Delta) <= m:
            i = len(self._Delta)
            width = min(self._gamma[i - 1], self.rho(i - 1) - self.rho(i))
            D = 80.0 * self.log_inv_eps(i - 1) ** 2 / width
            self._Delta.append(D)
            d = self.diameter(D)
            self._gamma.append(1.0 / d if d > 0 else math.inf)
        return self._Delta[m]

    def gamma(self, m: int) -> float:
        self.Delta(m)
        return self._gamma[m]

    def Lambda(self, m: int) -> float:
        return self.cte * self.diameter(self.Delta(m)) ** 2

    def kappa(self, m: int) -> float:
        """``kappa`` with ``kappa^20 = eps_m^(1/20)``."""
        return math.exp(-self.log_inv_eps(m) / 400.0)


# --------------------------------------------------------------------------
# Lie series
# --------------------------------------------------------------------------


@dataclass
class LieSeries:
    value: TFPoly
    n_terms: int
    last_norm: float
    converged: bool


def lie_series(f: TFPoly, s: TFPoly, tol: float = 1e-14, n_max: int = 30, radii: DomainRadii | None = None,
               skip_first: bool = False, chop: float = 0.0) -> LieSeries:
    """``sum_n ad_s^n f / n!`` with ``ad_s f = {f, s}``.

    Stops once a term's weighted norm drops below ``tol * max(1, |f|)`` or
    after ``n_max`` terms.  With ``skip_first`` the ``n = 0`` term is left out.
    Monomials of a term with magnitude at most ``chop`` are discarded before
    the next bracket; their mass is tracked in ``dropped``.
    """
    radii = radii or DomainRadii(0.5, 0.25, 0.5)
    if s.nterms == 0 or f.nterms == 0:
        zero = TFPoly.zero(f.lattice, f.caps)
        return LieSeries(zero if skip_first else f, 0, 0.0, True)
    scale = max(1.0, vf_weighted_norm(f, radii))
    total = TFPoly.zero(f.lattice, f.caps) if skip_first else f
    term = f
    last = math.inf
    for n in range(1, n_max + 1):
        term = poisson_bracket(term, s).scale(1.0 / n)
        if chop > 0:
            term = term.chop(chop)
        if term.nterms == 0:
            return LieSeries(total, n, 0.0, True)
        total = total + term
        last = vf_weighted_norm(term, radii)
        if last < tol * scale:
            return LieSeries(total, n, last, True)
    return LieSeries(total, n_max, last, False)


def lie_transform(f: TFPoly, s: TFPoly, tol: float = 1e-14, n_max: int = 30, radii=None,
                  chop: float = 0.0) -> TFPoly:
    """``f`` composed with the time-one flow of ``s``, as the series of ``ad_s``.

    Emits :class:`DivergenceWarning` when the terms have not decayed by ``n_max``.
    """
    out = lie_series(f, s, tol, n_max, radii, chop=chop)
    if not out.converged:
        warnings.warn(f"Lie series not below tolerance after {n_max} terms (last {out.last_norm:.3e})",
                      DivergenceWarning, stacklevel=2)
    return out.value


# --------------------------------------------------------------------------
# KAM step
# --------------------------------------------------------------------------


def _low_norm(f: TFPoly, radii) -> float:
    return vf_weighted_norm(split_low_high(f)[0], radii)


def kam_step(h: NormalForm, f: TFPoly, sp: StepParams, blocks: BlockDecomposition, tol: float = 1e-14,
             n_max: int = 30, chop: float = 0.0):
    """One Newton step: solve the homological equation and transform.

    ``f_new = exp(ad_s)(h + f) - h - h1``, evaluated as
    ``f - h1 + sum_{n>=1} ad_s^n (h + f) / n!`` so that the large
    coefficients of ``h`` never cancel against themselves.  Monomials of
    magnitude at most ``chop`` are discarded from the series terms and from
    ``f_new``; with the mass cut by the caps it is reported as ``dropped``.

    Returns
    -------
    h_new : NormalForm
        ``omega + chi1`` and ``H + H1``; the constant ``a1`` is only logged.
    f_new : TFPoly
    s : TFPoly
    diag : dict
    """
    radii = sp.radii
    before = _low_norm(f, radii)
    if f.nterms == 0:
        return h, f, TFPoly.zero(f.lattice, f.caps), {"low_before": 0.0, "low_after": 0.0, "lie_terms": 0}
    sol = solve_homological(h, f, sp, blocks)
    hf = h.as_poly(f.caps) + f
    series = lie_series(hf, sol.s, tol, n_max, radii, skip_first=True, chop=chop)
    if not series.converged:
        warnings.warn("Lie series of the KAM step did not converge", DivergenceWarning, stacklevel=2)
    f_new = f - sol.h1 + series.value
    if chop > 0:
        f_new = f_new.chop(chop)
    h_new = h.updated(d_omega=sol.chi1, d_H=sol.H1)
    after = _low_norm(f_new, radii)
    diag = {
        "low_before": before,
        "low_after": after,
        "high_norm": vf_weighted_norm(split_low_high(f_new)[1], radii),
        "ratio": after / before**2 if before > 0 else 0.0,
        "a1": sol.a1,
        "chi1_norm": float(np.abs(sol.chi1).max(initial=0.0)),
        "H1_norm": sol.H1.norm(),
        "lie_terms": series.n_terms,
        "lie_last": series.last_norm,
        "lie_converged": series.converged,
        "dropped": f_new.dropped,
        "min_divisor": sol.diagnostics["min_divisor"],
        "residual": sol.diagnostics.get("residual"),
    }
    return h_new, f_new, sol.s, diag


@dataclass
class InnerResult:
    h: NormalForm
    f: TFPoly
    generators: list
    records: list


def inner_loop(h: NormalForm, f: TFPoly, schedule: InnerSchedule, blocks: BlockDecomposition, w=None, *,
               fourier_cutoff: float | None = None, lattice_cutoff: float | None = None, tol: float = 0.0,
               lie_tol: float = 1e-14, lie_n_max: int = 30, min_steps: int = 0, chop: float = 0.0) -> InnerResult:
    """Up to ``max(schedule.n, min_steps)`` KAM steps at a fixed cutoff.

    The cutoffs default to the schedule's ``Delta'``; callers clip them to
    the truncation caps and the box.  Stops early once the weighted norm
    of the low part is at most ``tol``.

    Raises
    ------
    SmallDivisorViolation
        With ``step`` set to the failing sub-step index.
    """
    del w
    dp = schedule.delta_prime if fourier_cutoff is None else fourier_cutoff
    lc = dp if lattice_cutoff is None else lattice_cutoff
    generators, records = [], []
    for j in range(max(schedule.n, min_steps)):
        radii = schedule.radii(min(j, schedule.n))
        if _low_norm(f, radii) <= tol:
            break
        sp = StepParams(schedule.kappa, max(1.0, dp), radii, Lambda=schedule.Lambda_j(j), lattice_cutoff=lc)
        try:
            h, f, s, diag = kam_step(h, f, sp, blocks, lie_tol, lie_n_max, chop)
        except SmallDivisorViolation as exc:
            exc.step = j
            raise
        generators.append(s)
        diag.update({"j": j + 1, "target_eps": schedule.eps_j(j + 1), "kappa": schedule.kappa,
                     "delta_prime": dp, "lattice_cutoff": lc})
        records.append(diag)
    return InnerResult(h, f, generators, records)


# --------------------------------------------------------------------------
# outer iteration
# --------------------------------------------------------------------------


@dataclass
class KamSettings:
    """Knobs of the outer iteration.

    Attributes
    ----------
    tol : float
        Stop once the low part's weighted norm is at most this.
    m_max : int
        Maximum number of outer steps.
    kappa_cap : float
        Upper bound on the small-divisor floor.
    fourier_clip, lattice_clip : float, optional
        Clips of the Fourier and site-distance cutoffs; default to the
        Fourier cap and the box diameter.
    delta_clip : float, optional
        Clip of the block scale; defaults to the box diameter.
    cte : float
    retries : int
        Working points tried after a small-divisor failure.
    lie_tol, lie_n_max : float, int
        Lie-series stopping rule.
    chop : float
        Coefficient magnitude below which monomials are discarded during
        a step.
    """

    tol: float = 1e-12
    m_max: int = 4
    kappa_cap: float = 1e-3
    fourier_clip: float | None = None
    lattice_clip: float | None = None
    delta_clip: float | None = None
    delta0: float = 2.0
    cte: float = 1.0
    retries: int = 3
    lie_tol: float = 1e-14
    lie_n_max: int = 30
    chop: float = 1e-20


@dataclass
class KamResult:
    """Outcome of the outer iteration at one working parameter point."""

    omega_inf: np.ndarray
    H_inf: LatticeMatrix
    h_inf: NormalForm
    generators: list
    f_inf: TFPoly
    records: list
    status: str
    w: np.ndarray | None = None
    omega0: np.ndarray | None = None
    H0: LatticeMatrix | None = None
    radii_final: DomainRadii | None = None
    grid: ParameterGrid | None = None
    summary: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def run_log_lines(self) -> list:
        return [json.dumps(r, default=_json_default, sort_keys=True) for r in self.records]

    def to_json(self) -> str:
        lat = self.f_inf.lattice
        return json.dumps(
            {
                "status": self.status,
                "w": None if self.w is None else [float(x) for x in self.w],
                "omega_inf": [float(x) for x in self.omega_inf],
                "H_inf": {f"{a},{b}": np.real(blk).tolist() for (a, b), blk in self.H_inf.entries().items()},
                "normal_sites": [list(s) for s in lat.normal_sites],
                "generators": [dumps(s) for s in self.generators],
                "f_inf": dumps(self.f_inf),
                "summary": self.summary,
            },
            default=_json_default,
            indent=1,
        )


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"cannot serialise {type(x)}")


def _box_diameter(lattice: LatticeConfig) -> float:
    return 2.0 * lattice.box_radius * math.sqrt(lattice.d)


def _block_diameter_fn(lattice: LatticeConfig, clip: float):
    cache = {}

    def diameter(D: float) -> float:
        key = round(min(D, clip), 9)
        if key not in cache:
            cache[key] = build_blocks(lattice, key).diameter
        return cache[key]

    return diameter


def outer_iterate(h0: NormalForm, f0: TFPoly, schedule: OuterSchedule | None = None,
                  grid: ParameterGrid | None = None, stop: KamSettings | None = None, *,
                  radii: DomainRadii, model=None, nf_model=None, log=None) -> KamResult:
    """Outer KAM iteration with inner normal-form loops.

    Parameters
    ----------
    h0, f0 : NormalForm, TFPoly
        Starting Hamiltonian, used when ``model`` is not given.
    schedule : OuterSchedule, optional
        Built from the measured low norm of ``f0`` when omitted.
    grid : ParameterGrid, optional
        Parameter sample carved at every outer step (needs ``model``).
    stop : KamSettings
    radii : DomainRadii
        Initial domain.
    model : callable, optional
        ``w -> (NormalForm, TFPoly)``; the working point is the first grid
        survivor and is replaced by the next one after a small-divisor failure.
    nf_model : callable, optional
        ``w -> NormalForm`` used for carving; defaults to ``model(w)[0]``.
    log : callable, optional
        Receives every record as it is produced.
    """
    st = stop or KamSettings()
    lat = f0.lattice
    box = _box_diameter(lat)
    fourier_clip = st.fourier_clip or float(f0.caps.k_max)
    lattice_clip = st.lattice_clip or box
    delta_clip = st.delta_clip or box
    diameter = _block_diameter_fn(lat, delta_clip)

    tried = 0
    current_grid = grid.copy() if grid is not None else None
    while True:
        w = None
        h, f = h0, f0
        if model is not None and current_grid is not None:
            alive = current_grid.survivors()
            if len(alive) == 0:
                return _finish(h0, h0, f0, [], [], "empty_survivors", None, current_grid, radii, st)
            w = current_grid.points[alive[0]]
            h, f = model(w)
        try:
            return _run(h, f, schedule, current_grid, st, radii, nf_model or (model and (lambda x: model(x)[0])),
                        w, diameter, fourier_clip,
                        lattice_clip, delta_clip, log)
        except SmallDivisorViolation as exc:
            tried += 1
            if current_grid is None or w is None or tried > st.retries:
                return _finish(h, h, f, [], [{"event": "violation", "error": str(exc)}], "violation", w,
                               current_grid, radii, st)
            idx = int(current_grid.survivors()[0])
            current_grid.kill(idx, {"condition": exc.condition, "k": list(exc.mode), "blocks": list(exc.blocks),
                                    "value": exc.divisor})


def _run(h0, f0, schedule, grid, st, radii, nf_model, w, diameter, fourier_clip, lattice_clip, delta_clip, log):
    h, f = h0, f0
    eps0 = _low_norm(f, radii)
    records, generators = [], []
    if eps0 <= st.tol:
        return _finish(h0, h, f, generators, records, "converged", w, grid, radii, st)
    sched = schedule or OuterSchedule(min(eps0, 0.5), radii.rho, radii.sigma, radii.mu, radii.gamma, st.delta0,
                                      diameter, st.cte)
    status = "not_converged"
    eps_hist = []
    steps_run = 0
    eps_stepped = []
    for m in range(1, st.m_max + 1):
        r_prev = DomainRadii(sched.rho(m - 1), sched.mu(m - 1), sched.sigma(m - 1), radii.gamma)
        eps_m = _low_norm(f, r_prev)
        eps_hist.append(eps_m)
        if eps_m <= st.tol:
            status = "converged"
            break
        Delta_m = min(sched.Delta(m), delta_clip)
        blocks = build_blocks(f.lattice, Delta_m)
        kappa = min(math.exp(-_log_inv(eps_m) / 400.0), st.kappa_cap)
        gamma_m = min(max(sched.gamma(m - 1), 1e-6), 0.999)
        gamma_plus = sched.gamma(m)
        if not gamma_plus < gamma_m:
            gamma_plus = gamma_m / 2.0
        inner = InnerSchedule(
            eps=min(eps_m, 0.5), kappa=kappa, gamma=gamma_m, gamma_plus=gamma_plus,
            rho=sched.rho(m - 1), rho_plus=sched.rho(m), sigma=sched.sigma(m - 1), sigma_plus=sched.sigma(m),
            mu=sched.mu(m - 1), Lambda=sched.Lambda(m - 1) if m > 1 else 1.0, d_delta=blocks.diameter,
            d_delta_prime=diameter(min(sched.Delta(m), delta_clip)), cte=st.cte,
        )
        fc = max(1.0, min(inner.delta_prime, fourier_clip))
        lc = min(inner.delta_prime, lattice_clip)
        probe = StepParams(kappa, fc, r_prev, lattice_cutoff=lc)
        survivors = None
        if grid is not None and nf_model is not None:
            grid, _, _ = carve(grid, nf_model, blocks, probe)
            survivors = grid.n_alive
            if survivors == 0:
                status = "empty_survivors"
                break
        if w is not None:
            verdict = check_conditions(w, h, blocks, probe)
            if not verdict.passed:
                wit = verdict.witness
                raise SmallDivisorViolation(wit["condition"], wit["k"], tuple(wit["blocks"]), wit["value"])
        out = inner_loop(h, f, inner, blocks, w, fourier_cutoff=fc, lattice_cutoff=lc, tol=st.tol,
                         lie_tol=st.lie_tol, lie_n_max=st.lie_n_max, min_steps=1, chop=st.chop)
        h, f = out.h, out.f
        if out.records:
            steps_run += 1
            eps_stepped.append(eps_m)
        generators.extend(out.generators)
        for rec in out.records:
            rec.update({"m": m, "Delta_m": Delta_m, "eps_m": eps_m, "survivors": survivors,
                        "excluded_fraction": None if grid is None else grid.excluded_fraction,
                        "omega_drift": float(np.abs(h.omega - h0.omega).max()),
                        "H_drift": (h.H - h0.H).norm()})
            records.append(rec)
            if log is not None:
                log(rec)
        if not out.records:
            records.append({"m": m, "eps_m": eps_m, "note": "inner loop made no step"})
    else:
        r_last = DomainRadii(sched.rho(st.m_max), sched.mu(st.m_max), sched.sigma(st.m_max), radii.gamma)
        if _low_norm(f, r_last) <= st.tol:
            status = "converged"
    result = _finish(h0, h, f, generators, records, status, w, grid, radii, st, sched, eps_hist, eps_stepped)
    result.summary["outer_steps"] = steps_run
    return result


def _finish(h0, h, f, generators, records, status, w, grid, radii, st, sched=None, eps_hist=(), eps_stepped=()):
    m_done = len(eps_hist)
    final = radii if sched is None or m_done == 0 else DomainRadii(
        sched.rho(m_done), sched.mu(m_done), sched.sigma(m_done), radii.gamma)
    drift_omega = float(np.abs(h.omega - h0.omega).max()) if len(h.omega) else 0.0
    drift_H = (h.H - h0.H).norm()
    # drift bound: sum of eps^(2/3) over the outer steps that moved h
    envelope = float(sum(e ** (2.0 / 3.0) for e in eps_stepped))
    low = _low_norm(f, final)
    summary = {
        "status": status,
        "outer_steps": 0,
        "kam_steps": len(generators),
        "eps_history": list(eps_hist),
        "low_norm_final": low,
        "drift_omega": drift_omega,
        "drift_H": drift_H,
        "envelope": envelope,
        "fitted_c": max(drift_omega, drift_H) / envelope if envelope > 0 else 0.0,
        "radii_final": [final.rho, final.mu, final.sigma],
        "radii_floor_ok": final.rho >= radii.rho / 2 and final.mu >= radii.mu / 4 and final.sigma >= radii.sigma / 2,
    }
    return KamResult(h.omega.copy(), h.H.copy(), h, list(generators), f, list(records), status, w,
                     h0.omega.copy(), h0.H.copy(), final, grid, summary)


# --------------------------------------------------------------------------
# transformation of points
# --------------------------------------------------------------------------


def _series_at(g: TFPoly, s: TFPoly, point, tol: float, n_max: int) -> complex:
    """``sum_n ad_s^n g / n!`` evaluated at ``point`` term by term."""
    phi, r, zeta = point
    total = 0.0j
    term = g
    for n in range(0, n_max + 1):
        if n > 0:
            term = poisson_bracket(term, s).scale(1.0 / n)
        if term.nterms == 0:
            break
        val = term(phi, r, zeta)
        total += val
        if n > 0 and abs(val) < tol:
            break
    return total


def _flow_point(s: TFPoly, point, tol: float, n_max: int):
    lat, caps = s.lattice, s.caps
    phi, r, xi, eta = point
    zeta = np.concatenate([xi, eta])
    args = (phi, r, zeta)
    nA, nL = lat.n_tangential, lat.n_normal
    new_phi = np.array(phi, dtype=float).copy()
    new_r = np.zeros(nA)
    new_xi = np.zeros(nL)
    new_eta = np.zeros(nL)
    for a in range(nA):
        new_phi[a] = phi[a] + np.real(_phi_shift(s, a, args, tol, n_max))
        new_r[a] = np.real(_series_at(TFPoly.action(lat, caps, a), s, args, tol, n_max))
    for b in range(nL):
        new_xi[b] = np.real(_series_at(TFPoly.xi(lat, caps, b), s, args, tol, n_max))
        new_eta[b] = np.real(_series_at(TFPoly.eta(lat, caps, b), s, args, tol, n_max))
    return new_phi, new_r, new_xi, new_eta


def _phi_shift(s: TFPoly, a: int, args, tol: float, n_max: int) -> complex:
    """``sum_{n>=1} ad_s^{n-1}(d_{r_a} s) / n!`` at a point.

    ``ad_s phi_a = d s / d r_a``, after which every term is polynomial.
    """
    total = 0.0j
    term = s.d_r(a)
    for n in range(1, n_max + 1):
        if n > 1:
            term = poisson_bracket(term, s)
        if term.nterms == 0:
            break
        val = term(*args) / math.factorial(n)
        total += val
        if abs(val) < tol:
            break
    return total


def compose_transform(result, point, tol: float = 1e-15, n_max: int = 40):
    """Map a point through the accumulated transformation.

    ``point = (phi, r, xi, eta)``; the generators are applied last first, so
    the returned point is ``Phi_1(Phi_2(...Phi_N(point)))``.
    """
    gens = result.generators if hasattr(result, "generators") else list(result)
    phi, r, xi, eta = (np.asarray(x, dtype=float).copy() for x in point)
    for s in reversed(gens):
        if s.nterms == 0:
            continue
        phi, r, xi, eta = _flow_point(s, (phi, r, xi, eta), tol, n_max)
    return phi, r, xi, eta
