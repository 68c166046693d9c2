"""Lattice Hamiltonian of the nonlinear Schrödinger equation and its direct simulation.

The equation ``-i u_t = -Lap u + V * u + eps dF/d(conj u)`` with
``F = c |u|^(2m+2)`` is written in Fourier modes ``u = sum u_a e^{i<a,x>}``.
Tangential modes use action-angle variables ``u_a = sqrt(q_a + r_a) e^{i phi_a}``
and normal modes the real pair ``u_a = (xi_a + i eta_a) / sqrt(2)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import binom

from .algebra import Caps, LatticeConfig, TFPoly
from .errors import ConfigurationError, ContractError
from .lattice import LatticeMatrix, NormalForm

__all__ = [
    "NlsSpec",
    "CollocationGrid",
    "FieldState",
    "Trajectory",
    "StabilityProfile",
    "build_hamiltonian",
    "normal_form_at",
    "momentum_audit",
    "field_from_coordinates",
    "sobolev_norm",
    "energy",
    "integrate",
    "stability_experiment",
    "demo_model",
]


# --------------------------------------------------------------------------
# model description
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NlsSpec:
    """Model data.

    Attributes
    ----------
    V_hat : dict
        Real Fourier coefficients of the potential keyed by site tuples;
        absent sites read as zero.
    epsilon : float
        Size of the nonlinearity.
    q : dict, optional
        Positive amplitudes of the tangential modes (default 1 for every site).
    m : int
        The nonlinearity is ``|u|^(2m+2)``.
    coefficient : float
        Constant factor in front of the nonlinearity.
    caps : Caps
        Truncation caps of the expanded perturbation.
    """

    V_hat: dict
    epsilon: float
    caps: Caps
    q: dict | None = None
    m: int = 1
    coefficient: float = 1.0

    def __post_init__(self):
        for site, value in self.V_hat.items():
            if not np.isreal(value):
                raise ConfigurationError(f"potential coefficient at {site} is not real")
        if self.m < 1:
            raise ConfigurationError("nonlinearity degree m must be at least 1")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be nonnegative")

    def v(self, site) -> float:
        return float(self.V_hat.get(tuple(int(x) for x in site), 0.0))

    def amplitude(self, site) -> float:
        if self.q is None:
            return 1.0
        key = tuple(int(x) for x in site)
        if key not in self.q:
            raise ConfigurationError(f"missing amplitude q for tangential site {key}")
        return float(self.q[key])

    def with_parameters(self, lattice: LatticeConfig, w) -> "NlsSpec":
        """Copy with ``V_hat`` on the tangential sites replaced by ``w``."""
        table = dict(self.V_hat)
        for site, value in zip(lattice.tangential_sites, np.asarray(w, dtype=float)):
            table[tuple(site)] = float(value)
        return replace(self, V_hat=table)

    def with_epsilon(self, epsilon: float) -> "NlsSpec":
        return replace(self, epsilon=float(epsilon))


def normal_form_at(spec: NlsSpec, lattice: LatticeConfig) -> NormalForm:
    """Unperturbed frequencies ``|a|^2 + V_hat(a)`` with ``H = 0``."""
    omega = [sum(x * x for x in a) + spec.v(a) for a in lattice.tangential_sites]
    Omega = [sum(x * x for x in a) + spec.v(a) for a in lattice.normal_sites]
    return NormalForm(lattice, np.array(omega), np.array(Omega), LatticeMatrix.zeros(lattice))


def _tangential_mode(lattice, caps, index: int, q: float, sign: int) -> TFPoly:
    """``sqrt(q + r) e^{sign i phi}`` with the square root expanded to ``deg_r``."""
    nA = lattice.n_tangential
    rows, coefs = [], []
    for n in range(caps.deg_r + 1):
        row = np.zeros(lattice.n_columns, dtype=np.int64)
        row[index] = sign
        row[nA + index] = n
        rows.append(row)
        coefs.append(binom(0.5, n) * q ** (0.5 - n))
    return TFPoly.from_arrays(lattice, caps, np.array(rows), np.array(coefs))


def _normal_mode(lattice, caps, index: int, sign: int) -> TFPoly:
    """``(xi + sign i eta) / sqrt(2)``."""
    nA, nL = lattice.n_tangential, lattice.n_normal
    rows = np.zeros((2, lattice.n_columns), dtype=np.int64)
    rows[0, 2 * nA + index] = 1
    rows[1, 2 * nA + nL + index] = 1
    return TFPoly.from_arrays(lattice, caps, rows, np.array([1.0, sign * 1j]) / math.sqrt(2.0))


def build_hamiltonian(spec: NlsSpec, lattice: LatticeConfig) -> tuple[NormalForm, TFPoly]:
    """Normal form and perturbation of the NLS lattice Hamiltonian.

    The perturbation is ``eps c sum u_{a_1}..u_{a_{m+1}} conj(u_{b_1})..conj(u_{b_{m+1}})``
    over ``sum a = sum b``, built as ``sum_c P_c conj(P_c)`` with
    ``P_c = sum_{a_1+..+a_{m+1}=c} u_{a_1}..u_{a_{m+1}}``.  Terms beyond the
    caps are dropped (their mass is kept in ``f.dropped``).
    """
    caps = spec.caps
    nf = normal_form_at(spec, lattice)
    if spec.epsilon == 0:
        return nf, TFPoly.zero(lattice, caps)
    modes = {}
    for i, a in enumerate(lattice.tangential_sites):
        q = spec.amplitude(a)
        if q <= 0:
            raise ContractError(f"amplitude at tangential site {a} must be positive for the square-root expansion")
        modes[tuple(a)] = _tangential_mode(lattice, caps, i, q, +1)
    for j, b in enumerate(lattice.normal_sites):
        modes[tuple(b)] = _normal_mode(lattice, caps, j, +1)

    partial = dict(modes)
    for _ in range(spec.m):
        grown = {}
        for c, pc in partial.items():
            for a, ua in modes.items():
                key = tuple(x + y for x, y in zip(c, a))
                grown.setdefault(key, []).append(pc * ua)
        partial = {key: _sum(terms) for key, terms in grown.items()}

    f = TFPoly.zero(lattice, caps)
    pieces = [pc * pc.conj_reflect() for pc in partial.values() if pc.nterms]
    f = _sum(pieces) if pieces else f
    f = f.scale(spec.epsilon * spec.coefficient).real_part()
    return nf, f


def _sum(polys: list) -> TFPoly:
    first = polys[0]
    if len(polys) == 1:
        return first
    exps = np.concatenate([p.exps for p in polys])
    coeffs = np.concatenate([p.coeffs for p in polys])
    dropped = sum(p.dropped for p in polys)
    return TFPoly.from_arrays(first.lattice, first.caps, exps, coeffs, dropped)


def momentum_audit(f: TFPoly) -> np.ndarray:
    """Boolean per term: some sign choice of the normal factors conserves momentum.

    Each normal factor ``xi_b`` or ``eta_b`` mixes ``u_b`` and ``conj(u_b)``,
    so a term is admissible when ``sum k_a a + sum s_j b_j = 0`` for at least
    one choice of signs ``s_j``.
    """
    lat = f.lattice
    nA, nL = lat.n_tangential, lat.n_normal
    if f.nterms == 0:
        return np.zeros(0, dtype=bool)
    K = f.k.astype(np.int64)
    base = K @ lat.tangential_array
    B = f.beta.astype(np.int64)
    counts = B[:, :nL] + B[:, nL:]
    ok = np.zeros(f.nterms, dtype=bool)
    sites = lat.normal_array
    for t in range(f.nterms):
        factors = np.repeat(np.arange(nL), counts[t])
        vecs = sites[factors]
        target = -base[t]
        reach = {tuple(np.zeros(lat.d, dtype=np.int64))}
        for v in vecs:
            reach = {tuple(np.array(x) + v) for x in reach} | {tuple(np.array(x) - v) for x in reach}
        ok[t] = tuple(target) in reach
    return ok


def demo_model(epsilon: float = 1e-5, box_radius: int = 2, caps: Caps | None = None, d: int = 2):
    """The reference model: two tangential sites ``(0, 0)`` and ``(1, 0)`` in ``d = 2``.

    ``V_hat(a) = 0.3 exp(-|a|)`` on the tangential sites and zero elsewhere,
    ``q_a = 1``, ``p = 2``.
    """
    if d != 2:
        raise ConfigurationError("the reference model is two-dimensional")
    A = ((0, 0), (1, 0))
    lattice = LatticeConfig(2, 2, A, box_radius)
    caps = caps or Caps(4, 1, 2)
    V = {a: 0.3 * math.exp(-math.hypot(*a)) for a in A}
    spec = NlsSpec(V_hat=V, epsilon=epsilon, caps=caps, q={a: 1.0 for a in A})
    return spec, lattice


# --------------------------------------------------------------------------
# field states on the collocation grid
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CollocationGrid:
    """Pseudo-spectral grid with ``N`` points per axis, ``N`` the smallest power of two with ``N >= 2(2R+1)``."""

    d: int
    box_radius: int
    N: int = 0

    def __post_init__(self):
        if self.N == 0:
            n = 1
            while n < 2 * (2 * self.box_radius + 1):
                n *= 2
            object.__setattr__(self, "N", n)

    @property
    def shape(self):
        return (self.N,) * self.d

    def wavenumbers(self) -> np.ndarray:
        """Integer wavevectors of every grid mode, shape ``shape + (d,)``."""
        freq = np.fft.fftfreq(self.N, 1.0 / self.N).astype(np.int64)
        mesh = np.meshgrid(*([freq] * self.d), indexing="ij")
        return np.stack(mesh, axis=-1)

    def index(self, site) -> tuple:
        return tuple(int(x) % self.N for x in site)

    def bracket_weights(self, p: float) -> np.ndarray:
        """``<a>^(2p)`` with ``<a> = max(1, |a|)``."""
        k = self.wavenumbers()
        norm = np.sqrt((k**2).sum(-1).astype(float))
        return np.maximum(1.0, norm) ** (2.0 * p)

    def frequencies(self, spec: NlsSpec) -> np.ndarray:
        k = self.wavenumbers()
        sq = (k**2).sum(-1).astype(float)
        v = np.zeros(self.shape)
        for site, value in spec.V_hat.items():
            if len(site) == self.d and max(abs(x) for x in site) <= self.box_radius:
                v[self.index(site)] = value
        return sq + v


@dataclass(frozen=True)
class FieldState:
    """Fourier coefficients on the whole collocation grid and the current time."""

    grid: CollocationGrid
    u: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if self.u.shape != self.grid.shape:
            raise ConfigurationError("field does not match the grid")

    @classmethod
    def from_sites(cls, grid: CollocationGrid, values: dict, t: float = 0.0) -> "FieldState":
        u = np.zeros(grid.shape, dtype=complex)
        for site, val in values.items():
            u[grid.index(site)] += val
        return cls(grid, u, t)

    def value(self, site) -> complex:
        return complex(self.u[self.grid.index(site)])

    def physical(self) -> np.ndarray:
        return np.fft.ifftn(self.u) * self.u.size


def field_from_coordinates(lattice: LatticeConfig, spec: NlsSpec, phi, r, xi, eta, grid=None) -> FieldState:
    """Field of the lattice point ``(phi, r, xi, eta)``."""
    grid = grid or CollocationGrid(lattice.d, lattice.box_radius)
    values = {}
    for i, a in enumerate(lattice.tangential_sites):
        amp = spec.amplitude(a) + float(np.real(r[i]))
        if amp < 0:
            raise ContractError("negative action: point lies outside the action-angle chart")
        values[tuple(a)] = math.sqrt(amp) * np.exp(1j * np.real(phi[i]))
    for j, b in enumerate(lattice.normal_sites):
        values[tuple(b)] = (xi[j] + 1j * eta[j]) / math.sqrt(2.0)
    return FieldState.from_sites(grid, values)


def sobolev_norm(state: FieldState, p: float) -> float:
    """``sqrt(sum |u_a|^2 <a>^(2p))``."""
    return float(np.sqrt((np.abs(state.u) ** 2 * state.grid.bracket_weights(p)).sum()))


def energy(state: FieldState, spec: NlsSpec) -> float:
    """``sum omega_a |u_a|^2 + eps c mean_x |u|^(2m+2)`` on the grid."""
    lin = float((state.grid.frequencies(spec) * np.abs(state.u) ** 2).sum())
    if spec.epsilon == 0:
        return lin
    phys = np.abs(state.physical()) ** (2 * spec.m + 2)
    return lin + spec.epsilon * spec.coefficient * float(phys.mean())


# --------------------------------------------------------------------------
# time stepping
# --------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Recorded snapshots of one or several simultaneously integrated fields."""

    times: np.ndarray
    fields: np.ndarray  # (n_records, batch) + grid shape
    energies: np.ndarray  # (n_records, batch)


def _strang(U: np.ndarray, freqs, spec: NlsSpec, dt: float, n_steps: int, record_every: int, grid):
    """Second-order splitting on a batch ``U`` of Fourier arrays."""
    axes = tuple(range(1, U.ndim))
    size = float(np.prod(grid.shape))
    half = np.exp(-0.5j * freqs * dt)
    g = spec.epsilon * spec.coefficient * (spec.m + 1)
    times, snaps = [0.0], [U.copy()]
    for step in range(1, n_steps + 1):
        U = U * half
        if g != 0:
            X = np.fft.ifftn(U, axes=axes) * size
            X *= np.exp(-1j * g * dt * np.abs(X) ** (2 * spec.m))
            U = np.fft.fftn(X, axes=axes) / size
        U = U * half
        if step % record_every == 0 or step == n_steps:
            times.append(step * dt)
            snaps.append(U.copy())
    return np.array(times), np.array(snaps)


def integrate(state, spec: NlsSpec, dt: float, T: float, record_every: int = 1) -> Trajectory:
    """Integrate one field or a list of fields over ``[0, T]`` (``T < 0`` runs backwards).

    Linear sub-steps rotate every mode exactly; nonlinear sub-steps rotate
    the phase pointwise on the grid, where ``|u|`` is conserved.
    """
    if dt <= 0:
        raise ContractError("time step must be positive")
    states = state if isinstance(state, (list, tuple)) else [state]
    grid = states[0].grid
    U = np.stack([s.u for s in states])
    n_steps = int(round(abs(T) / dt))
    step = dt if T >= 0 else -dt
    times, snaps = _strang(U, grid.frequencies(spec), spec, step, n_steps, max(1, record_every), grid)
    times = times + states[0].t
    energies = np.array([[energy(FieldState(grid, s[b]), spec) for b in range(len(states))] for s in snaps])
    return Trajectory(times, snaps, energies)


# --------------------------------------------------------------------------
# stability experiment
# --------------------------------------------------------------------------


@dataclass
class StabilityProfile:
    """``C(t) = ||u(t) - u0(t)||_p / delta`` along both time directions."""

    times: np.ndarray
    C: np.ndarray
    distance: np.ndarray
    energy: np.ndarray
    sup_C: float
    energy_drift: float
    delta: float
    p: float
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["t", "hp_distance", "C", "energy"])
        for row in zip(self.times, self.distance, self.C, self.energy):
            writer.writerow([f"{x:.12g}" for x in row])
        return buf.getvalue()


def _perturbation(lattice: LatticeConfig, grid, delta: float, p: float, n_modes: int, seed: int) -> FieldState:
    sq = lattice.normal_sq_norms
    order = np.lexsort((np.arange(lattice.n_normal), sq))[:n_modes]
    rng = np.random.default_rng(seed)
    phases = np.exp(2j * np.pi * rng.random(len(order)))
    values = {tuple(lattice.normal_sites[j]): phases[i] for i, j in enumerate(order)}
    state = FieldState.from_sites(grid, values)
    return FieldState(grid, state.u * (delta / sobolev_norm(state, p)))


def torus_point(result, lattice: LatticeConfig, spec: NlsSpec, grid=None) -> FieldState:
    """Field at angle zero on the torus, through the KAM transformation when available."""
    nA, nL = lattice.n_tangential, lattice.n_normal
    point = (np.zeros(nA), np.zeros(nA), np.zeros(nL), np.zeros(nL))
    if result is not None and getattr(result, "generators", None):
        from .kamflow import compose_transform

        point = compose_transform(result, point)
    phi, r, xi, eta = (np.real(np.asarray(x)) for x in point)
    return field_from_coordinates(lattice, spec, phi, r, xi, eta, grid)


def stability_experiment(
    result,
    spec: NlsSpec,
    lattice: LatticeConfig,
    delta: float,
    p: float,
    dt: float = 1e-2,
    T: float | None = None,
    seed: int = 0,
    n_modes: int = 8,
    record_every: int = 100,
    both_directions: bool = True,
) -> StabilityProfile:
    """Distance growth between the torus solution and a ``delta``-perturbed one.

    Parameters
    ----------
    result : KamResult or None
        Supplies the torus embedding; ``None`` uses the unperturbed torus.
    delta : float
        ``H^p`` size of the perturbation, in (0, 1).
    T : float, optional
        Time horizon, default ``1 / delta``.
    """
    if not 0.0 < delta < 1.0:
        raise ContractError("delta must lie in (0, 1)")
    grid = CollocationGrid(lattice.d, lattice.box_radius)
    base = torus_point(result, lattice, spec, grid)
    pert = _perturbation(lattice, grid, delta, p, n_modes, seed)
    start = FieldState(grid, base.u + pert.u)
    horizon = 1.0 / delta if T is None else float(T)
    weights = grid.bracket_weights(p)
    times, dists, energies = [], [], []
    directions = (1.0, -1.0) if both_directions else (1.0,)
    for sign in directions:
        traj = integrate([base, start], spec, dt, sign * horizon, record_every)
        diff = traj.fields[:, 1] - traj.fields[:, 0]
        dist = np.sqrt((np.abs(diff) ** 2 * weights).sum(axis=tuple(range(1, diff.ndim))))
        sl = slice(None) if sign > 0 else slice(1, None)
        times.append(traj.times[sl])
        dists.append(dist[sl])
        energies.append(traj.energies[sl])
    t = np.concatenate(times)
    order = np.argsort(t, kind="stable")
    t = t[order]
    dist = np.concatenate(dists)[order]
    E = np.concatenate(energies)[order]
    E0 = E[t == 0][0]
    drift = float(np.max(np.abs(E - E0[None, :]) / np.maximum(np.abs(E0[None, :]), 1e-300)))
    C = dist / delta
    return StabilityProfile(
        t, C, dist, E[:, 1], float(C.max()), drift, delta, p,
        {"dt": dt, "horizon": horizon, "grid_points": grid.N, "seed": seed},
    )
