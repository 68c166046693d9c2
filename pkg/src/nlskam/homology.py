"""Homological equation of one KAM step, solved component by component.

For a normal form ``h = <omega, r> + 0.5 <zeta, M zeta>`` and a perturbation
``f`` the generator ``s`` (weight <= 2, ``|k|_1 <= delta_prime``) and the
normal-form increment ``h1`` satisfy

    {h, s} = -T f^low - T {f^high, s}^low + h1

where ``T`` is the Fourier/lattice truncation.  The coupling term only
depends on the angle part ``s_phi`` (for the zeta-linear class) and on
``s_phi + s1`` (for the r-linear and zeta-quadratic classes), so the
components are solved in the order phi, zeta-linear, r-linear,
zeta-quadratic.

Normal-mode equations are diagonalised in one global eigenbasis of
``L = M J``: ``L = V diag(D) V^-1`` with ``D = (-i mu, +i mu)`` built from the
block spectra ``mu`` of the Hermitian form of ``M``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .algebra import (
    DomainRadii,
    LowJet,
    TFPoly,
    low_jet,
    poisson_bracket,
    split_low_high,
    truncate_low_jet,
    vf_weighted_norm,
)
from .errors import ConfigurationError, ContractError, InvariantViolation, SmallDivisorViolation
from .lattice import (
    BlockDecomposition,
    LatticeMatrix,
    NormalForm,
    coarsen_blocks,
    hermitian_form,
    pi_project,
    spectrum_by_site,
)

__all__ = [
    "StepParams",
    "HomologicalSolution",
    "Eigenbasis",
    "eigenbasis",
    "solve_es4",
    "solve_es5",
    "solve_es6",
    "solve_es7",
    "compute_coupling",
    "solve_homological",
]

RESIDUAL_BOUND = 1e-9


@dataclass(frozen=True)
class StepParams:
    """Parameters of one homological solve.

    Attributes
    ----------
    kappa : float
        Small-divisor floor, in (0, 1).
    delta_prime : float
        Fourier and lattice cutoff, at least 1.
    radii : DomainRadii
        Domain on which norms are measured.
    tau : float, optional
        Analyticity loss per substep; defaults to ``rho / 200``.
    Lambda : float
        Lipschitz scale, carried for diagnostics only.
    lattice_cutoff : float, optional
        Site-distance cutoff of the matrix truncation; defaults to
        ``delta_prime``.
    """

    kappa: float
    delta_prime: float
    radii: DomainRadii
    tau: float | None = None
    Lambda: float = 1.0
    lattice_cutoff: float | None = None

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ConfigurationError("kappa must lie in (0, 1)")
        if self.delta_prime < 1.0:
            raise ConfigurationError("delta_prime must be at least 1")
        tau = self.radii.rho / 200.0 if self.tau is None else float(self.tau)
        if not 0.0 < tau < self.radii.rho / 100.0:
            raise ConfigurationError("tau must lie in (0, rho/100)")
        object.__setattr__(self, "tau", tau)
        if self.lattice_cutoff is None:
            object.__setattr__(self, "lattice_cutoff", float(self.delta_prime))

    def truncate(self, p: TFPoly) -> TFPoly:
        """Fourier and lattice truncation of a weight <= 2 polynomial."""
        return truncate_low_jet(p, self.delta_prime, lattice_cutoff=self.lattice_cutoff)


@dataclass
class HomologicalSolution:
    """Generator, normal-form increment and solve diagnostics."""

    s: TFPoly
    h1: TFPoly
    H1: LatticeMatrix
    a1: float
    chi1: np.ndarray
    components: dict = field(repr=False)
    diagnostics: dict = field(default_factory=dict)

    def diagnostics_json(self) -> str:
        return json.dumps(self.diagnostics, indent=1, default=float)


# --------------------------------------------------------------------------
# eigenbasis of the normal linear operator
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Eigenbasis:
    """Diagonalisation ``M J = V diag(D) V^-1`` in interleaved coordinates.

    Slots ``0..n-1`` carry eigenvalues ``-i mu`` and slots ``n..2n-1`` carry
    ``+i mu``; ``slot_block`` gives the block of every slot.
    """

    blocks: BlockDecomposition
    mu: np.ndarray
    V: np.ndarray
    Vinv: np.ndarray
    D: np.ndarray
    slot_block: np.ndarray
    slot_sq_norm: np.ndarray
    slot_half: np.ndarray

    def block_support(self, site_pattern: np.ndarray) -> np.ndarray:
        """Boolean block-pair matrix where a site pattern has nonzero entries."""
        ind = self.blocks.indicator()
        return (ind.T @ (site_pattern != 0) @ ind) > 0


def _complexifier(n: int) -> np.ndarray:
    s = 1.0 / math.sqrt(2.0)
    P = np.zeros((2 * n, 2 * n), dtype=complex)
    a = np.arange(n)
    P[2 * a, a] = s
    P[2 * a, n + a] = s
    P[2 * a + 1, a] = -1j * s
    P[2 * a + 1, n + a] = 1j * s
    return P


def eigenbasis(nf: NormalForm, blocks: BlockDecomposition) -> Eigenbasis:
    """Eigenbasis of ``M J`` over ``blocks`` coarsened with the support of ``H``."""
    eff = coarsen_blocks(blocks, nf.H.site_pattern())
    mu, U = spectrum_by_site(nf, eff)
    n = nf.lattice.n_normal
    P = _complexifier(n)
    V = P @ block_diag(U.conj(), U)
    Vinv = block_diag(U.T, U.conj().T) @ P.conj().T
    D = np.concatenate([-1j * mu, 1j * mu])
    sb = np.concatenate([eff.block_of, eff.block_of])
    sq = np.concatenate([nf.lattice.normal_sq_norms] * 2)
    half = np.repeat([0, 1], n)
    return Eigenbasis(eff, mu, V, Vinv, D, sb, sq, half)


def _mode_freqs(modes: np.ndarray, omega: np.ndarray) -> np.ndarray:
    return modes.astype(float) @ np.asarray(omega, dtype=float)


def _site_pattern(vec_or_mat: np.ndarray, n: int) -> np.ndarray:
    if vec_or_mat.ndim == 1:
        return np.abs(vec_or_mat.reshape(n, 2)).max(axis=1)
    return np.abs(vec_or_mat.reshape(n, 2, n, 2)).max(axis=(1, 3))


class _DivisorLog:
    """Running minimum of the divisors actually used."""

    def __init__(self, kappa: float):
        self.kappa = kappa
        self.minimum = math.inf
        self.witness = None

    def record(self, value: float, condition: str, mode, blocks=()):
        if value < self.minimum:
            self.minimum = float(value)
            self.witness = {"condition": condition, "k": [int(x) for x in mode], "blocks": list(blocks)}
        if value < self.kappa:
            raise SmallDivisorViolation(condition, mode, blocks, value)


# --------------------------------------------------------------------------
# tangential components
# --------------------------------------------------------------------------


def _tangential_solve(F: TFPoly, omega, sp: StepParams, log: _DivisorLog, what: str):
    """Divide the ``k != 0`` modes by ``i <k, omega>`` and return the ``k = 0`` part."""
    if F.nterms == 0:
        return F, F
    kept = F.select(F.k_norms() <= sp.delta_prime + 1e-9)
    lam = _mode_freqs(kept.k, omega)
    zero = np.all(kept.k == 0, axis=1)
    active = ~zero & (kept.coeffs != 0)
    if active.any():
        mags = np.abs(lam[active])
        i = int(np.argmin(mags))
        log.record(float(mags[i]), "sd1", kept.k[active][i])
    moving = kept.select(~zero)
    s = moving.with_coeffs(moving.coeffs / (1j * lam[~zero]))
    return s, kept.select(zero)


def solve_es4(f_phi: TFPoly, omega, sp: StepParams, _log: _DivisorLog | None = None):
    """Angle part: ``-<omega, d_phi s_phi> + T f_phi - a1 = 0``.

    Returns
    -------
    s_phi : TFPoly
        Coefficients ``F(k) / (i <k, omega>)`` for ``0 < |k|_1 <= delta_prime``.
    a1 : float
        Mean value ``F(0)``.
    """
    if f_phi.nterms and (f_phi.r_degrees().any() or f_phi.z_degrees().any()):
        raise ContractError("solve_es4 expects a function of the angles only")
    log = _log or _DivisorLog(sp.kappa)
    s, mean = _tangential_solve(f_phi, omega, sp, log, "phi")
    a1 = complex(mean.coeffs.sum()) if mean.nterms else 0.0
    return s, float(np.real(a1))


def solve_es6(F0: TFPoly, omega, sp: StepParams, _log: _DivisorLog | None = None):
    """Action-linear part, solved like the angle part coefficient by coefficient.

    Returns
    -------
    s0 : TFPoly
    chi1 : ndarray
        Coefficients of ``r`` in the ``k = 0`` mode.
    """
    if F0.nterms and (np.any(F0.r_degrees() != 1) or F0.z_degrees().any()):
        raise ContractError("solve_es6 expects a function linear in r and free of zeta")
    log = _log or _DivisorLog(sp.kappa)
    s, mean = _tangential_solve(F0, omega, sp, log, "r")
    chi1 = np.zeros(F0.lattice.n_tangential)
    if mean.nterms:
        chi1[mean.alpha.argmax(axis=1)] = np.real(mean.coeffs)
    return s, chi1


# --------------------------------------------------------------------------
# normal components
# --------------------------------------------------------------------------


def _check_linear(jet: LowJet, basis: Eigenbasis, lam, log: _DivisorLog):
    n = jet.lattice.n_normal
    for m, k in enumerate(jet.modes):
        pattern = _site_pattern(jet.z1[m], n)
        if not pattern.any():
            continue
        live_blocks = np.zeros(basis.blocks.n_blocks, dtype=bool)
        live_blocks[basis.blocks.block_of[pattern != 0]] = True
        slots = live_blocks[basis.slot_block]
        mags = np.abs(-1j * lam[m] + basis.D[slots])
        i = int(np.argmin(mags))
        log.record(float(mags[i]), "sd2", k, (int(basis.slot_block[slots][i]),))


def solve_es5(
    F1: TFPoly,
    nf: NormalForm,
    blocks: BlockDecomposition,
    sp: StepParams,
    basis: Eigenbasis | None = None,
    _log: _DivisorLog | None = None,
) -> TFPoly:
    """Zeta-linear part: ``(-i <k, omega> + M J) x_k = -F1_k`` for every mode.

    Solved in the eigenbasis of ``M J`` with divisors ``<k, omega> -+ mu``.
    """
    if F1.nterms and (F1.r_degrees().any() or np.any(F1.z_degrees() != 1)):
        raise ContractError("solve_es5 expects a zeta-linear function free of r")
    if F1.nterms == 0:
        return F1
    basis = basis or eigenbasis(nf, blocks)
    log = _log or _DivisorLog(sp.kappa)
    F1 = F1.select(F1.k_norms() <= sp.delta_prime + 1e-9)
    jet = low_jet(F1)
    lam = _mode_freqs(jet.modes, nf.omega)
    _check_linear(jet, basis, lam, log)
    Y = -jet.z1 @ basis.Vinv.T
    div = -1j * lam[:, None] + basis.D[None, :]
    X = np.where(Y != 0, Y / np.where(div == 0, 1.0, div), 0.0)
    out = LowJet.empty(jet.lattice, F1.caps, jet.modes)
    out.z1[:] = X @ basis.V.T
    return out.to_poly()


def _resonant_part(Z0: np.ndarray, nf: NormalForm) -> LatticeMatrix:
    """Projected part of a ``k = 0`` quadratic matrix on site pairs of equal norm."""
    lat = nf.lattice
    P, _ = pi_project(LatticeMatrix(lat, Z0))
    sq = lat.normal_sq_norms
    same = np.repeat(np.repeat(sq[:, None] == sq[None, :], 2, 0), 2, 1)
    return LatticeMatrix(lat, np.where(same, P.dense, 0.0))


def solve_es7(
    F2: TFPoly,
    nf: NormalForm,
    blocks: BlockDecomposition,
    sp: StepParams,
    basis: Eigenbasis | None = None,
    _log: _DivisorLog | None = None,
):
    """Zeta-quadratic part: ``-i<k,omega> S + L S + S L^T = -F2_k + H1 [k = 0]``.

    The ``k = 0`` projected part on equal-norm site pairs is returned as
    ``H1`` instead of being solved.  Divisors are
    ``<k, omega> -+ (mu_j + mu_l)`` and ``<k, omega> -+ (mu_j - mu_l)``.

    Returns
    -------
    s2 : TFPoly
    H1 : LatticeMatrix
    """
    lat = nf.lattice
    if F2.nterms and (F2.r_degrees().any() or np.any(F2.z_degrees() != 2)):
        raise ContractError("solve_es7 expects a zeta-quadratic function free of r")
    H1 = LatticeMatrix.zeros(lat)
    if F2.nterms == 0:
        return F2, H1
    basis = basis or eigenbasis(nf, blocks)
    log = _log or _DivisorLog(sp.kappa)
    F2 = sp.truncate(F2)
    jet = low_jet(F2)
    lam = _mode_freqs(jet.modes, nf.omega)
    n = lat.n_normal
    R = -jet.z2.copy()
    zero_mode = np.flatnonzero(np.all(jet.modes == 0, axis=1))
    same_half = basis.slot_half[:, None] == basis.slot_half[None, :]
    equal_norm = basis.slot_sq_norm[:, None] == basis.slot_sq_norm[None, :]
    if len(zero_mode):
        m0 = int(zero_mode[0])
        H1 = _resonant_part(jet.z2[m0], nf)
        if np.abs(H1.dense.imag).max(initial=0.0) > 1e-10 * (1 + np.abs(H1.dense).max(initial=0.0)):
            raise InvariantViolation("resonant part is not real")
        H1 = LatticeMatrix(lat, H1.dense.real)
        Q1 = hermitian_form(H1)
        if np.abs(Q1 - Q1.conj().T).max(initial=0.0) > 1e-10:
            raise InvariantViolation("normal-form increment is not Hermitian")
        R[m0] += H1.dense
    out = LowJet.empty(lat, F2.caps, jet.modes)
    for m, k in enumerate(jet.modes):
        support = basis.block_support(_site_pattern(R[m], n))
        if not support.any():
            continue
        mask = support[basis.slot_block[:, None], basis.slot_block[None, :]]
        if m in zero_mode:
            mask &= same_half | ~equal_norm
        div = -1j * lam[m] + basis.D[:, None] + basis.D[None, :]
        mags = np.where(mask, np.abs(div), np.inf)
        i, j = np.unravel_index(int(np.argmin(mags)), mags.shape)
        log.record(
            float(mags[i, j]),
            "sd3" if same_half[i, j] else "sd4",
            k,
            (int(basis.slot_block[i]), int(basis.slot_block[j])),
        )
        Y = basis.Vinv @ R[m] @ basis.Vinv.T
        X = np.where(mask, Y / np.where(mask, div, 1.0), 0.0)
        S = basis.V @ X @ basis.V.T
        out.z2[m] = 0.5 * (S + S.T)
    return out.to_poly(), H1


# --------------------------------------------------------------------------
# coupling
# --------------------------------------------------------------------------


_CLASS_SELECTORS = {
    0: lambda p: (p.r_degrees() == 1) & (p.z_degrees() == 0),
    1: lambda p: (p.r_degrees() == 0) & (p.z_degrees() == 1),
    2: lambda p: (p.r_degrees() == 0) & (p.z_degrees() == 2),
}


def compute_coupling(f_high: TFPoly, s_partial: TFPoly, target_weight_class: int) -> TFPoly:
    """Weight-graded part of ``{f_high, s_partial}``.

    Parameters
    ----------
    f_high : TFPoly
        Terms of weight at least three.
    s_partial : TFPoly
        The angle part of the generator (class 1) or the angle plus
        zeta-linear parts (classes 0 and 2).
    target_weight_class : {0, 1, 2}
        0 selects the r-linear part, 1 the zeta-linear part and 2 the
        zeta-quadratic part.
    """
    if target_weight_class not in _CLASS_SELECTORS:
        raise ContractError("target class must be 0, 1 or 2")
    if f_high.nterms and f_high.weights().min() < 3:
        raise ContractError("f_high contains terms of weight below three")
    if s_partial.nterms:
        if s_partial.r_degrees().any():
            raise ContractError("the partial generator may not depend on r at this stage")
        limit = 0 if target_weight_class == 1 else 1
        if s_partial.z_degrees().max() > limit:
            raise ContractError("the partial generator contains components not yet solved")
    if f_high.nterms == 0 or s_partial.nterms == 0:
        return TFPoly.zero(f_high.lattice, f_high.caps)
    # only weights 3 and 4 can reach weight <= 2 through a weight <= 1 generator
    src = f_high.select(f_high.weights() <= 4)
    g = poisson_bracket(src, s_partial)
    return g.select(_CLASS_SELECTORS[target_weight_class](g))


# --------------------------------------------------------------------------
# full solve
# --------------------------------------------------------------------------


def _normal_form_poly(lat, caps, a1, chi1, H1: LatticeMatrix) -> TFPoly:
    jet = LowJet.empty(lat, caps, np.zeros((1, lat.n_tangential), dtype=np.int64))
    jet.phi[0] = a1
    jet.r[0] = chi1
    jet.z2[0] = H1.dense
    return jet.to_poly()


def _by_degree(p: TFPoly, dr: int, dz: int) -> TFPoly:
    return p.select((p.r_degrees() == dr) & (p.z_degrees() == dz))


def solve_homological(
    h: NormalForm, f: TFPoly, sp: StepParams, blocks: BlockDecomposition, check: bool = True
) -> HomologicalSolution:
    """Generator and normal-form increment for one KAM step.

    Parameters
    ----------
    h : NormalForm
    f : TFPoly
        Perturbation (all weights).
    sp : StepParams
    blocks : BlockDecomposition
        Decomposition of the normal sites; it is coarsened internally with the
        support of ``h.H``.
    check : bool
        Recompute the full equation and enforce the residual bound.

    Raises
    ------
    SmallDivisorViolation
        When a divisor used by the solve falls below ``sp.kappa``.
    """
    lat = f.lattice
    caps = f.caps
    log = _DivisorLog(sp.kappa)
    low, high = split_low_high(f)
    Tlow = sp.truncate(low)
    basis = eigenbasis(h, blocks)

    s_phi, a1 = solve_es4(_by_degree(Tlow, 0, 0), h.omega, sp, log)
    G1 = sp.truncate(compute_coupling(high, s_phi, 1))
    s1 = solve_es5(_by_degree(Tlow, 0, 1) + G1, h, blocks, sp, basis, log)
    s_part = s_phi + s1
    G0 = sp.truncate(compute_coupling(high, s_part, 0))
    G2 = sp.truncate(compute_coupling(high, s_part, 2))
    s0, chi1 = solve_es6(_by_degree(Tlow, 1, 0) + G0, h.omega, sp, log)
    s2, H1 = solve_es7(_by_degree(Tlow, 0, 2) + G2, h, blocks, sp, basis, log)

    s = s_phi + s1 + s0 + s2
    h1 = _normal_form_poly(lat, caps, a1, chi1, H1)
    radii = sp.radii
    components = {"s_phi": s_phi, "s1": s1, "s0": s0, "s2": s2}
    diag = {
        "min_divisor": log.minimum,
        "min_divisor_witness": log.witness,
        "excluded": False,
        "offending_condition": None,
        "n_blocks": basis.blocks.n_blocks,
        "coupling_norms": {
            "G0": vf_weighted_norm(G0, radii),
            "G1": vf_weighted_norm(G1, radii),
            "G2": vf_weighted_norm(G2, radii),
        },
        "component_norms": {name: vf_weighted_norm(p, radii) for name, p in components.items()},
        "a1": a1,
    }
    diag["component_norms"]["h1"] = vf_weighted_norm(h1, radii)
    sol = HomologicalSolution(s, h1, H1, a1, chi1, components, diag)
    if check:
        resid = homological_residual(h, f, sol, sp)
        scale = 1.0 + vf_weighted_norm(f, radii)
        diag["residual"] = resid
        diag["residual_relative"] = resid / scale
        if resid > RESIDUAL_BOUND * scale:
            raise InvariantViolation(f"homological residual {resid:.3e} exceeds bound")
    return sol


def homological_residual(h: NormalForm, f: TFPoly, sol: HomologicalSolution, sp: StepParams) -> float:
    """``|| {h, s} + T f^low + T {f^high, s}^low - h1 ||`` in the weighted vector-field norm.

    The coupling is recomputed from the full generator, independently of the
    graded pieces used during the solve.
    """
    low, high = split_low_high(f)
    lhs = poisson_bracket(h.as_poly(f.caps), sol.s)
    src = high.select(high.weights() <= 4) if high.nterms else high
    coupling = split_low_high(poisson_bracket(src, sol.s))[0]
    resid = lhs + sp.truncate(low) + sp.truncate(coupling) - sol.h1
    return vf_weighted_norm(resid, sp.radii)
