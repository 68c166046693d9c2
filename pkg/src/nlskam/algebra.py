"""Sparse truncated Taylor-Fourier polynomials in angle, action and normal variables.

A :class:`TFPoly` is a finite sum of monomials

    c * exp(i <k, phi>) * r**alpha * zeta**beta

where ``phi`` and ``r`` are indexed by the tangential sites and ``zeta``
runs over two copies of the normal sites (the ``xi`` copy followed by the
``eta`` copy).  Monomials are stored row-wise in a small-integer exponent
matrix together with a pair of 64-bit linear hashes of each row.  Because
the hash is linear in the exponents, the exponents of a product or bracket
term are known by key without materialising the row, which keeps the
Poisson bracket vectorised.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError

__all__ = [
    "LatticeConfig",
    "Caps",
    "DomainRadii",
    "MultiIndex",
    "TFPoly",
    "LowJet",
    "VectorFieldValue",
    "poisson_bracket",
    "split_low_high",
    "truncate_low_jet",
    "low_jet",
    "vf_weighted_norm",
    "vf_ptame_norm",
    "ptame_components",
    "eval_vector_field",
    "dumps",
    "loads",
]

_EXP_DTYPE = np.int8
_PAIR_BUDGET = 2_000_000
_MERGE_BUDGET = 4_000_000


# --------------------------------------------------------------------------
# configuration types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeConfig:
    """Finite lattice on which polynomials and fields live.

    Parameters
    ----------
    d : int
        Spatial dimension.
    p : float
        Sobolev exponent, must exceed ``d / 2``.
    tangential_sites : sequence of int tuples
        The finite tangential set ``A``; every site must lie in the box.
    box_radius : int
        The box is ``{a : max_i |a_i| <= box_radius}``.
    normal_sites : tuple, optional
        Derived automatically as the box minus ``A`` in lexicographic order.
        If given it must equal the derived value.
    """

    d: int
    p: float
    tangential_sites: tuple
    box_radius: int
    normal_sites: tuple | None = None

    def __post_init__(self):
        if int(self.d) < 1:
            raise ConfigurationError("dimension d must be >= 1")
        if not self.p > self.d / 2:
            raise ConfigurationError(f"Sobolev exponent p={self.p} must exceed d/2={self.d / 2}")
        if int(self.box_radius) < 0:
            raise ConfigurationError("box radius must be nonnegative")
        tang = tuple(tuple(int(x) for x in s) for s in self.tangential_sites)
        if not tang:
            raise ConfigurationError("tangential site set must be nonempty")
        if len(set(tang)) != len(tang):
            raise ConfigurationError("tangential sites must be distinct")
        for s in tang:
            if len(s) != self.d:
                raise ConfigurationError(f"site {s} does not have dimension {self.d}")
            if max(abs(x) for x in s) > self.box_radius:
                raise ConfigurationError(f"tangential site {s} lies outside the box")
        tset = set(tang)
        box = itertools.product(range(-self.box_radius, self.box_radius + 1), repeat=self.d)
        normal = tuple(s for s in box if s not in tset)
        if self.normal_sites is not None:
            given = tuple(tuple(int(x) for x in s) for s in self.normal_sites)
            if given != normal:
                raise ConfigurationError("normal_sites must be the box minus the tangential sites")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "p", float(self.p))
        object.__setattr__(self, "box_radius", int(self.box_radius))
        object.__setattr__(self, "tangential_sites", tang)
        object.__setattr__(self, "normal_sites", normal)

    @property
    def n_tangential(self) -> int:
        return len(self.tangential_sites)

    @property
    def n_normal(self) -> int:
        return len(self.normal_sites)

    @property
    def n_columns(self) -> int:
        """Width of an exponent row: ``k``, ``alpha`` and the two zeta copies."""
        return 2 * self.n_tangential + 2 * self.n_normal

    @cached_property
    def tangential_array(self) -> np.ndarray:
        return np.array(self.tangential_sites, dtype=np.int64).reshape(-1, self.d)

    @cached_property
    def normal_array(self) -> np.ndarray:
        return np.array(self.normal_sites, dtype=np.int64).reshape(-1, self.d)

    @cached_property
    def normal_index(self) -> dict:
        return {s: i for i, s in enumerate(self.normal_sites)}

    @cached_property
    def normal_sq_norms(self) -> np.ndarray:
        return (self.normal_array**2).sum(axis=1)

    def site_weights(self, p: float | None = None) -> np.ndarray:
        """``<a>**p`` with ``<a> = max(|a|, 1)`` for each normal site."""
        p = self.p if p is None else p
        bracket = np.maximum(np.sqrt(self.normal_sq_norms.astype(float)), 1.0)
        return bracket**p

    def interleaved_weights(self, p: float | None = None) -> np.ndarray:
        """Site weights repeated for the two real (or complex) components."""
        return np.repeat(self.site_weights(p), 2)


@dataclass(frozen=True)
class Caps:
    """Truncation caps: max ``|k|_1``, max total ``r`` degree, max total ``zeta`` degree."""

    k_max: int
    deg_r: int
    deg_z: int

    def __post_init__(self):
        for name in ("k_max", "deg_r", "deg_z"):
            v = int(getattr(self, name))
            if v < 0:
                raise ConfigurationError(f"cap {name} must be nonnegative")
            if v > 60:
                raise ConfigurationError(f"cap {name}={v} exceeds the supported range")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class DomainRadii:
    """Complex domain ``|Im phi| <= rho, |r| <= mu, ||zeta||_p <= sigma`` plus lattice weight ``gamma``."""

    rho: float
    mu: float
    sigma: float
    gamma: float = 0.5

    def __post_init__(self):
        for name in ("rho", "mu", "sigma", "gamma"):
            v = float(getattr(self, name))
            if not 0.0 < v < 1.0:
                raise ConfigurationError(f"radius {name}={v} must lie in (0, 1)")
            object.__setattr__(self, name, v)

    @classmethod
    def standard(cls, sigma: float, gamma: float = 0.5) -> "DomainRadii":
        """Radii under the convention ``rho = sigma`` and ``mu = sigma**2``."""
        return cls(rho=sigma, mu=sigma * sigma, sigma=sigma, gamma=gamma)


class MultiIndex(NamedTuple):
    """Exponent triple of one monomial; ``beta`` is a sorted tuple of ``(index, degree)`` pairs."""

    k: tuple
    alpha: tuple
    beta: tuple

    @property
    def weight(self) -> int:
        return 2 * sum(self.alpha) + sum(d for _, d in self.beta)


class VectorFieldValue(NamedTuple):
    """Hamiltonian vector field ``(f_r, -f_phi, f_eta, -f_xi)`` at a point."""

    phi_dot: np.ndarray
    r_dot: np.ndarray
    xi_dot: np.ndarray
    eta_dot: np.ndarray


# --------------------------------------------------------------------------
# hashing helpers
# --------------------------------------------------------------------------

_WEIGHT_CACHE: dict[int, np.ndarray] = {}


def _hash_weights(ncols: int) -> np.ndarray:
    w = _WEIGHT_CACHE.get(ncols)
    if w is None:
        rng = np.random.Generator(np.random.PCG64(0x7F4A7C15 + ncols))
        w = rng.bit_generator.random_raw(size=(ncols, 2)).astype(np.uint64) | np.uint64(1)
        _WEIGHT_CACHE[ncols] = w
    return w


def _row_keys(exps: np.ndarray) -> np.ndarray:
    """Two linear 64-bit hashes per exponent row, shape ``(n, 2)``."""
    w = _hash_weights(exps.shape[1])
    if exps.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.uint64)
    return exps.astype(np.int64).view(np.uint64) @ w


# --------------------------------------------------------------------------
# the polynomial type
# --------------------------------------------------------------------------


class TFPoly:
    """Immutable sparse truncated Taylor-Fourier polynomial.

    Attributes
    ----------
    lattice : LatticeConfig
    caps : Caps
    exps : ndarray of int8, shape (n_terms, n_columns)
        Columns are ``k`` (tangential), ``alpha`` (tangential) and ``beta``
        (xi copy then eta copy of the normal sites).
    coeffs : ndarray of complex, shape (n_terms,)
    dropped : float
        Sum of absolute coefficients discarded by cap truncation while
        producing this polynomial.
    """

    __slots__ = ("lattice", "caps", "exps", "coeffs", "keys", "dropped")

    def __init__(self, lattice, caps, exps, coeffs, keys, dropped=0.0):
        self.lattice = lattice
        self.caps = caps
        self.exps = exps
        self.coeffs = coeffs
        self.keys = keys
        self.dropped = float(dropped)
        for arr in (exps, coeffs, keys):
            arr.setflags(write=False)

    # -- construction -----------------------------------------------------

    @classmethod
    def zero(cls, lattice: LatticeConfig, caps: Caps) -> "TFPoly":
        return cls(
            lattice,
            caps,
            np.zeros((0, lattice.n_columns), dtype=_EXP_DTYPE),
            np.zeros(0, dtype=complex),
            np.zeros((0, 2), dtype=np.uint64),
        )

    @classmethod
    def from_arrays(cls, lattice, caps, exps, coeffs, dropped=0.0) -> "TFPoly":
        """Build from raw exponent rows, applying caps and merging duplicates."""
        exps = np.asarray(exps)
        coeffs = np.asarray(coeffs, dtype=complex).reshape(-1)
        if exps.size == 0:
            exps = np.zeros((0, lattice.n_columns), dtype=np.int64)
        if exps.ndim != 2 or exps.shape[1] != lattice.n_columns:
            raise ConfigurationError("exponent rows do not match the lattice layout")
        nA = lattice.n_tangential
        if np.any(exps[:, nA:] < 0):
            raise ContractError("negative degree in exponent rows")
        ok = _within_caps(exps, nA, caps)
        dropped = float(dropped) + float(np.abs(coeffs[~ok]).sum())
        exps = exps[ok].astype(_EXP_DTYPE)
        coeffs = coeffs[ok]
        return _combine(lattice, caps, exps, coeffs, _row_keys(exps), dropped)

    @classmethod
    def from_terms(cls, lattice, caps, terms) -> "TFPoly":
        """Build from ``(k, alpha, beta)`` / coefficient pairs.

        ``beta`` may be a mapping or an iterable of ``(index, degree)`` pairs
        where the index runs over the doubled normal set (xi copy first).
        """
        rows, coeffs = [], []
        items = terms.items() if isinstance(terms, Mapping) else terms
        for (k, alpha, beta), c in items:
            rows.append(_make_row(lattice, k, alpha, beta))
            coeffs.append(c)
        if not rows:
            return cls.zero(lattice, caps)
        return cls.from_arrays(lattice, caps, np.array(rows), np.array(coeffs, dtype=complex))

    @classmethod
    def monomial(cls, lattice, caps, k=None, alpha=None, beta=(), coeff=1.0) -> "TFPoly":
        nA = lattice.n_tangential
        k = tuple(k) if k is not None else (0,) * nA
        alpha = tuple(alpha) if alpha is not None else (0,) * nA
        return cls.from_terms(lattice, caps, [((k, alpha, beta), coeff)])

    @classmethod
    def constant(cls, lattice, caps, value) -> "TFPoly":
        return cls.monomial(lattice, caps, coeff=value)

    @classmethod
    def action(cls, lattice, caps, a: int, coeff=1.0) -> "TFPoly":
        """The action coordinate ``r_a``."""
        alpha = [0] * lattice.n_tangential
        alpha[a] = 1
        return cls.monomial(lattice, caps, alpha=alpha, coeff=coeff)

    @classmethod
    def xi(cls, lattice, caps, b: int, coeff=1.0) -> "TFPoly":
        return cls.monomial(lattice, caps, beta=[(b, 1)], coeff=coeff)

    @classmethod
    def eta(cls, lattice, caps, b: int, coeff=1.0) -> "TFPoly":
        return cls.monomial(lattice, caps, beta=[(lattice.n_normal + b, 1)], coeff=coeff)

    @classmethod
    def fourier(cls, lattice, caps, k, coeff=1.0) -> "TFPoly":
        """The single Fourier mode ``coeff * exp(i <k, phi>)``."""
        return cls.monomial(lattice, caps, k=k, coeff=coeff)

    # -- basic views --------------------------------------------------------

    @property
    def nterms(self) -> int:
        return int(self.coeffs.shape[0])

    def __len__(self) -> int:
        return self.nterms

    @property
    def k(self) -> np.ndarray:
        return self.exps[:, : self.lattice.n_tangential].astype(np.int64)

    @property
    def alpha(self) -> np.ndarray:
        nA = self.lattice.n_tangential
        return self.exps[:, nA : 2 * nA].astype(np.int64)

    @property
    def beta(self) -> np.ndarray:
        return self.exps[:, 2 * self.lattice.n_tangential :].astype(np.int64)

    def k_norms(self) -> np.ndarray:
        return np.abs(self.k).sum(axis=1)

    def r_degrees(self) -> np.ndarray:
        return self.alpha.sum(axis=1)

    def z_degrees(self) -> np.ndarray:
        return self.beta.sum(axis=1)

    def weights(self) -> np.ndarray:
        """Per-term weight ``2|alpha| + |beta|``."""
        return 2 * self.r_degrees() + self.z_degrees()

    def terms(self) -> Iterable[tuple[MultiIndex, complex]]:
        for row, c in zip(self.exps.astype(np.int64), self.coeffs):
            yield _row_to_index(self.lattice, row), complex(c)

    def as_dict(self) -> dict:
        return dict(self.terms())

    def coeff(self, k, alpha, beta=()) -> complex:
        row = np.array([_make_row(self.lattice, k, alpha, beta)])
        key = _row_keys(row)[0]
        idx = _lookup(self.keys, key[None, :])[0]
        return complex(self.coeffs[idx]) if idx >= 0 else 0.0j

    def is_zero(self) -> bool:
        return self.nterms == 0

    def max_abs(self) -> float:
        return float(np.abs(self.coeffs).max()) if self.nterms else 0.0

    def _same(self, other: "TFPoly"):
        if not isinstance(other, TFPoly):
            raise TypeError("expected a TFPoly")
        if other.lattice != self.lattice:
            raise ConfigurationError("polynomials live on different lattice configurations")
        if other.caps != self.caps:
            raise ConfigurationError("polynomials carry different truncation caps")

    # -- ring operations -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float, complex)):
            other = TFPoly.constant(self.lattice, self.caps, other)
        self._same(other)
        if other.nterms == 0:
            return self
        if self.nterms == 0:
            return other
        return _combine(
            self.lattice,
            self.caps,
            np.concatenate([self.exps, other.exps]),
            np.concatenate([self.coeffs, other.coeffs]),
            np.concatenate([self.keys, other.keys]),
            self.dropped + other.dropped,
        )

    __radd__ = __add__

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float, complex)):
            return self + (-other)
        return self + other.scale(-1.0)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, factor) -> "TFPoly":
        factor = complex(factor)
        if factor == 0:
            return TFPoly.zero(self.lattice, self.caps)
        return TFPoly(self.lattice, self.caps, self.exps, self.coeffs * factor, self.keys, self.dropped * abs(factor))

    def __mul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return self.scale(other)
        self._same(other)
        return _pair_product(self, other, bracket=False)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return self.scale(1.0 / complex(other))

    def select(self, mask) -> "TFPoly":
        """Sub-polynomial made of the terms where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool)
        return TFPoly(self.lattice, self.caps, self.exps[mask], self.coeffs[mask], self.keys[mask], 0.0)

    def with_coeffs(self, coeffs) -> "TFPoly":
        coeffs = np.asarray(coeffs, dtype=complex)
        nz = coeffs != 0
        return TFPoly(self.lattice, self.caps, self.exps[nz], coeffs[nz], self.keys[nz], self.dropped)

    def chop(self, tol: float) -> "TFPoly":
        """Drop terms whose coefficient magnitude is at most ``tol``; their mass joins ``dropped``."""
        keep = np.abs(self.coeffs) > tol
        out = self.select(keep)
        out.dropped = self.dropped + float(np.abs(self.coeffs[~keep]).sum())
        return out

    def with_caps(self, caps: Caps) -> "TFPoly":
        """Re-home the polynomial under different caps, truncating if needed."""
        if caps == self.caps:
            return self
        ok = _within_caps(self.exps, self.lattice.n_tangential, caps)
        dropped = self.dropped + float(np.abs(self.coeffs[~ok]).sum())
        return TFPoly(self.lattice, caps, self.exps[ok], self.coeffs[ok], self.keys[ok], dropped)

    # -- reality ----------------------------------------------------------------

    def _reflected_keys(self) -> np.ndarray:
        nA = self.lattice.n_tangential
        w = _hash_weights(self.lattice.n_columns)[:nA]
        kpart = self.exps[:, :nA].astype(np.int64).view(np.uint64) @ w
        return self.keys - kpart - kpart

    def reality_defect(self) -> float:
        """Largest ``|c(-k, alpha, beta) - conj(c(k, alpha, beta))|`` over stored terms."""
        if self.nterms == 0:
            return 0.0
        idx = _lookup(self.keys, self._reflected_keys())
        partner = np.where(idx >= 0, self.coeffs[np.maximum(idx, 0)], 0.0)
        return float(np.abs(partner - np.conj(self.coeffs)).max())

    def conj_reflect(self) -> "TFPoly":
        """The polynomial whose value is the complex conjugate at real arguments."""
        nA = self.lattice.n_tangential
        exps = self.exps.copy()
        exps[:, :nA] = -exps[:, :nA]
        return _combine(self.lattice, self.caps, exps, np.conj(self.coeffs), self._reflected_keys(), self.dropped)

    def real_part(self) -> "TFPoly":
        """Project onto real-valued polynomials, ``(f + conj_reflect(f)) / 2``."""
        return (self + self.conj_reflect()).scale(0.5)

    # -- calculus -----------------------------------------------------------------

    def d_phi(self, a: int) -> "TFPoly":
        ka = self.exps[:, a].astype(float)
        return self.with_coeffs(self.coeffs * 1j * ka)

    def d_r(self, a: int) -> "TFPoly":
        return self._lower(self.lattice.n_tangential + a)

    def d_zeta(self, j: int) -> "TFPoly":
        """Derivative in the ``j``-th coordinate of the doubled normal set."""
        return self._lower(2 * self.lattice.n_tangential + j)

    def _lower(self, col: int) -> "TFPoly":
        deg = self.exps[:, col]
        m = deg > 0
        exps = self.exps[m].copy()
        exps[:, col] -= 1
        w = _hash_weights(self.lattice.n_columns)[col]
        keys = self.keys[m] - w[None, :]
        coeffs = self.coeffs[m] * deg[m]
        return _combine(self.lattice, self.caps, exps, coeffs.astype(complex), keys, 0.0)

    def __call__(self, phi, r, zeta):
        """Evaluate at ``phi``, ``r`` and ``zeta`` (xi copy followed by eta copy)."""
        return complex(_evaluate(self, phi, r, zeta).sum())

    def __repr__(self):
        return f"TFPoly(nterms={self.nterms}, caps={self.caps}, dropped={self.dropped:.3g})"


# --------------------------------------------------------------------------
# internal helpers
# --------------------------------------------------------------------------


def _make_row(lattice, k, alpha, beta) -> np.ndarray:
    nA, nL = lattice.n_tangential, lattice.n_normal
    k = tuple(k)
    alpha = tuple(alpha)
    if len(k) != nA or len(alpha) != nA:
        raise ConfigurationError("k and alpha must have one entry per tangential site")
    row = np.zeros(lattice.n_columns, dtype=np.int64)
    row[:nA] = k
    row[nA : 2 * nA] = alpha
    pairs = beta.items() if isinstance(beta, Mapping) else beta
    for j, deg in pairs:
        if not 0 <= int(j) < 2 * nL:
            raise ConfigurationError(f"zeta index {j} outside the doubled normal set")
        row[2 * nA + int(j)] += int(deg)
    return row


def _row_to_index(lattice, row) -> MultiIndex:
    nA = lattice.n_tangential
    beta = tuple((int(j), int(d)) for j, d in enumerate(row[2 * nA :]) if d)
    return MultiIndex(tuple(int(x) for x in row[:nA]), tuple(int(x) for x in row[nA : 2 * nA]), beta)


def _within_caps(exps, nA, caps) -> np.ndarray:
    exps = exps.astype(np.int64)
    return (
        (np.abs(exps[:, :nA]).sum(axis=1) <= caps.k_max)
        & (exps[:, nA : 2 * nA].sum(axis=1) <= caps.deg_r)
        & (exps[:, 2 * nA :].sum(axis=1) <= caps.deg_z)
    )


def _group_sums(keys: np.ndarray, coeffs: np.ndarray):
    """Sort by key and sum duplicates; returns ``(representative positions, sums)``."""
    order = np.argsort(keys[:, 0], kind="stable")
    sk = keys[order]
    tie = sk[1:, 0] == sk[:-1, 0]
    if np.any(tie & (sk[1:, 1] != sk[:-1, 1])):
        order = np.lexsort((keys[:, 1], keys[:, 0]))
        sk = keys[order]
    new = np.ones(len(order), dtype=bool)
    new[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    starts = np.flatnonzero(new)
    sums = np.add.reduceat(coeffs[order], starts) if len(order) else coeffs[:0]
    return order[starts], sums


def _combine(lattice, caps, exps, coeffs, keys, dropped) -> TFPoly:
    if len(coeffs) == 0:
        z = TFPoly.zero(lattice, caps)
        z.dropped = float(dropped)
        return z
    rep, sums = _group_sums(keys, coeffs)
    nz = sums != 0
    rep = rep[nz]
    return TFPoly(lattice, caps, exps[rep], sums[nz], keys[rep], dropped)


def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Positions of ``query`` keys in a sorted key table, ``-1`` where absent."""
    if len(sorted_keys) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys[:, 0], query[:, 0], side="left")
    out = np.full(len(query), -1, dtype=np.int64)
    n = len(sorted_keys)
    # primary-key collisions are vanishingly rare; scan forward to be exact
    for step in range(4):
        p = pos + step
        valid = (p < n) & (out < 0)
        pv = np.minimum(p, n - 1)
        hit = valid & (sorted_keys[pv, 0] == query[:, 0]) & (sorted_keys[pv, 1] == query[:, 1])
        out[hit] = pv[hit]
    return out


def _evaluate(f: TFPoly, phi, r, zeta) -> np.ndarray:
    nA, nL = f.lattice.n_tangential, f.lattice.n_normal
    phi = np.asarray(phi, dtype=complex).reshape(nA)
    r = np.asarray(r, dtype=complex).reshape(nA)
    zeta = np.asarray(zeta, dtype=complex).reshape(2 * nL)
    if f.nterms == 0:
        return np.zeros(0, dtype=complex)
    E = f.exps.astype(np.int64)
    val = f.coeffs * np.exp(1j * (E[:, :nA] @ phi))
    val = val * np.prod(r[None, :] ** E[:, nA : 2 * nA], axis=1)
    B = E[:, 2 * nA :]
    cols = np.flatnonzero(B.any(axis=0))
    if len(cols):
        val = val * np.prod(zeta[cols][None, :] ** B[:, cols], axis=1)
    return val


def _pair_product(f: TFPoly, g: TFPoly, bracket: bool) -> TFPoly:
    """Shared engine for products and Poisson brackets."""
    lat, caps = f.lattice, f.caps
    nA, nL = lat.n_tangential, lat.n_normal
    ncol = lat.n_columns
    Ef, Eg = f.exps, g.exps
    kf, kg = Ef[:, :nA].astype(np.int64), Eg[:, :nA].astype(np.int64)
    rf, rg = f.r_degrees(), g.r_degrees()
    zf, zg = f.z_degrees(), g.z_degrees()
    cf, cg = f.coeffs, g.coeffs

    shifts = np.zeros((1 + nA + nL, ncol), dtype=np.int64)
    for a in range(nA):
        shifts[1 + a, nA + a] = 1
    for b in range(nL):
        shifts[1 + nA + b, 2 * nA + b] = 1
        shifts[1 + nA + b, 2 * nA + nL + b] = 1
    shift_keys = _row_keys(shifts)

    out_keys, out_coef, out_i, out_j, out_s = [], [], [], [], []
    dropped = [f.dropped + g.dropped]
    pending = [0]

    def merge():
        # sum duplicate monomials so the buffers stay near the output size
        keys = np.concatenate(out_keys)
        rep, sums = _group_sums(keys, np.concatenate(out_coef))
        fi, gj, sid = (np.concatenate(x)[rep] for x in (out_i, out_j, out_s))
        for buf, val in zip((out_keys, out_coef, out_i, out_j, out_s), (keys[rep], sums, fi, gj, sid)):
            buf[:] = [val]
        pending[0] = len(sums)

    def emit(i_idx, u, j_idx, v, sid, dr, dz):
        n1, n2 = len(i_idx), len(j_idx)
        if n1 == 0 or n2 == 0:
            return
        uf = u * cf[i_idx]
        vg = v * cg[j_idx]
        step = max(1, _PAIR_BUDGET // n2)
        for lo in range(0, n1, step):
            ii = i_idx[lo : lo + step]
            uu = uf[lo : lo + step]
            deg_ok = ((rf[ii][:, None] + rg[j_idx][None, :] - dr) <= caps.deg_r) & (
                (zf[ii][:, None] + zg[j_idx][None, :] - dz) <= caps.deg_z
            )
            if not deg_ok.all():
                dropped[0] += float((np.abs(uu)[:, None] * np.abs(vg)[None, :])[~deg_ok].sum())
            I, J = np.nonzero(deg_ok)
            if len(I) == 0:
                continue
            coef = uu[I] * vg[J]
            fi, gj = ii[I], j_idx[J]
            k_ok = np.abs(kf[fi] + kg[gj]).sum(axis=1) <= caps.k_max
            if not k_ok.all():
                dropped[0] += float(np.abs(coef[~k_ok]).sum())
                coef, fi, gj = coef[k_ok], fi[k_ok], gj[k_ok]
            if len(coef) == 0:
                continue
            out_keys.append(f.keys[fi] + g.keys[gj] - shift_keys[sid][None, :])
            out_coef.append(coef)
            out_i.append(fi)
            out_j.append(gj)
            out_s.append(np.full(len(fi), sid, dtype=np.int64))
            pending[0] += len(fi)
            if pending[0] > _MERGE_BUDGET:
                merge()

    if not bracket:
        emit(np.arange(f.nterms), np.ones(f.nterms), np.arange(g.nterms), np.ones(g.nterms), 0, 0, 0)
    else:
        for a in range(nA):
            fk = np.flatnonzero(Ef[:, a] != 0)
            fa = np.flatnonzero(Ef[:, nA + a] > 0)
            gk = np.flatnonzero(Eg[:, a] != 0)
            ga = np.flatnonzero(Eg[:, nA + a] > 0)
            # <d_phi f, d_r g>
            emit(fk, 1j * Ef[fk, a], ga, Eg[ga, nA + a].astype(float), 1 + a, 1, 0)
            # -<d_r f, d_phi g>
            emit(fa, -Ef[fa, nA + a].astype(float), gk, 1j * Eg[gk, a], 1 + a, 1, 0)
        off_x, off_e = 2 * nA, 2 * nA + nL
        fx_all = Ef[:, off_x : off_x + nL] > 0
        fe_all = Ef[:, off_e : off_e + nL] > 0
        gx_all = Eg[:, off_x : off_x + nL] > 0
        ge_all = Eg[:, off_e : off_e + nL] > 0
        active = np.flatnonzero((fx_all.any(0) & ge_all.any(0)) | (fe_all.any(0) & gx_all.any(0)))
        for b in active:
            fx = np.flatnonzero(fx_all[:, b])
            fe = np.flatnonzero(fe_all[:, b])
            gx = np.flatnonzero(gx_all[:, b])
            ge = np.flatnonzero(ge_all[:, b])
            # <d_xi f, d_eta g>
            emit(fx, Ef[fx, off_x + b].astype(float), ge, Eg[ge, off_e + b].astype(float), 1 + nA + b, 0, 2)
            # -<d_eta f, d_xi g>
            emit(fe, -Ef[fe, off_e + b].astype(float), gx, Eg[gx, off_x + b].astype(float), 1 + nA + b, 0, 2)

    if not out_coef:
        z = TFPoly.zero(lat, caps)
        z.dropped = dropped[0]
        return z
    merge()
    keys, sums, fi, gj, sid = (buf[0] for buf in (out_keys, out_coef, out_i, out_j, out_s))
    nz = sums != 0
    keys, sums, fi, gj, sid = keys[nz], sums[nz], fi[nz], gj[nz], sid[nz]
    exps = (Ef[fi].astype(np.int64) + Eg[gj].astype(np.int64) - shifts[sid]).astype(_EXP_DTYPE)
    return TFPoly(lat, caps, exps, sums, keys, dropped[0])


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def poisson_bracket(f: TFPoly, g: TFPoly) -> TFPoly:
    """Poisson bracket ``{f, g}``.

    Uses ``{f,g} = <f_phi, g_r> - <f_r, g_phi> + <f_xi, g_eta> - <f_eta, g_xi>``,
    so that ``d/dt g = {g, s}`` along the flow of the Hamiltonian ``s``.
    Terms beyond the caps are discarded and their absolute mass is added to
    :attr:`TFPoly.dropped`.
    """
    f._same(g)
    if f is g or f.nterms == 0 or g.nterms == 0:
        z = TFPoly.zero(f.lattice, f.caps)
        z.dropped = f.dropped + g.dropped
        return z
    return _pair_product(f, g, bracket=True)


def split_low_high(f: TFPoly) -> tuple[TFPoly, TFPoly]:
    """Split into the weight <= 2 jet and the weight >= 3 remainder."""
    low = f.weights() <= 2
    return f.select(low), f.select(~low)


def eval_vector_field(f: TFPoly, phi, r, xi, eta) -> VectorFieldValue:
    """Evaluate the Hamiltonian vector field of ``f`` at a point.

    Returns ``(phi_dot, r_dot, xi_dot, eta_dot) = (f_r, -f_phi, f_eta, -f_xi)``.
    Real inputs give real outputs.
    """
    lat = f.lattice
    nA, nL = lat.n_tangential, lat.n_normal
    zeta = np.concatenate([np.asarray(xi).reshape(nL), np.asarray(eta).reshape(nL)])
    real = all(np.isrealobj(np.asarray(x)) for x in (phi, r, xi, eta))
    phi_dot = np.array([f.d_r(a)(phi, r, zeta) for a in range(nA)])
    r_dot = -np.array([f.d_phi(a)(phi, r, zeta) for a in range(nA)])
    xi_dot = np.array([f.d_zeta(nL + b)(phi, r, zeta) for b in range(nL)])
    eta_dot = -np.array([f.d_zeta(b)(phi, r, zeta) for b in range(nL)])
    out = (phi_dot, r_dot, xi_dot, eta_dot)
    if real:
        out = tuple(np.real(x) for x in out)
    return VectorFieldValue(*out)


# --------------------------------------------------------------------------
# low jets in matrix form
# --------------------------------------------------------------------------


def zeta_to_interleaved(n_normal: int) -> np.ndarray:
    """Map a doubled-set zeta index to the interleaved ``(site, component)`` index."""
    j = np.arange(2 * n_normal)
    return np.where(j < n_normal, 2 * j, 2 * (j - n_normal) + 1)


def interleaved_to_zeta(n_normal: int) -> np.ndarray:
    i = np.arange(2 * n_normal)
    return np.where(i % 2 == 0, i // 2, n_normal + i // 2)


@dataclass
class LowJet:
    """Fourier-mode-wise arrays of a weight <= 2 polynomial.

    The normal coordinates are interleaved as ``(xi_0, eta_0, xi_1, ...)``
    so that ``z2[m]`` is a lattice matrix of 2x2 blocks; the quadratic part
    of mode ``m`` reads ``0.5 * zeta^T z2[m] zeta``.
    """

    lattice: LatticeConfig
    caps: Caps
    modes: np.ndarray
    phi: np.ndarray
    r: np.ndarray
    z1: np.ndarray
    z2: np.ndarray

    @classmethod
    def empty(cls, lattice, caps, modes) -> "LowJet":
        modes = np.asarray(modes, dtype=np.int64).reshape(-1, lattice.n_tangential)
        nK, nA, n2 = len(modes), lattice.n_tangential, 2 * lattice.n_normal
        return cls(
            lattice,
            caps,
            modes,
            np.zeros(nK, complex),
            np.zeros((nK, nA), complex),
            np.zeros((nK, n2), complex),
            np.zeros((nK, n2, n2), complex),
        )

    def mode_index(self) -> dict:
        return {tuple(int(x) for x in m): i for i, m in enumerate(self.modes)}

    def to_poly(self) -> TFPoly:
        lat = self.lattice
        nA, nL = lat.n_tangential, lat.n_normal
        to_z = interleaved_to_zeta(nL)
        rows, coefs = [], []
        n2 = 2 * nL
        iu, ju = np.triu_indices(n2)
        for m, k in enumerate(self.modes):
            base = np.zeros(lat.n_columns, dtype=np.int64)
            base[:nA] = k
            if self.phi[m] != 0:
                rows.append(base.copy())
                coefs.append(self.phi[m])
            for a in np.flatnonzero(self.r[m]):
                row = base.copy()
                row[nA + a] = 1
                rows.append(row)
                coefs.append(self.r[m, a])
            for i in np.flatnonzero(self.z1[m]):
                row = base.copy()
                row[2 * nA + to_z[i]] = 1
                rows.append(row)
                coefs.append(self.z1[m, i])
            mat = self.z2[m]
            vals = np.where(iu == ju, 0.5 * mat[iu, ju], mat[iu, ju])
            nzq = np.flatnonzero(vals)
            if len(nzq):
                block = np.tile(base, (len(nzq), 1))
                np.add.at(block, (np.arange(len(nzq)), 2 * nA + to_z[iu[nzq]]), 1)
                np.add.at(block, (np.arange(len(nzq)), 2 * nA + to_z[ju[nzq]]), 1)
                rows.extend(block)
                coefs.extend(vals[nzq])
        if not rows:
            return TFPoly.zero(lat, self.caps)
        return TFPoly.from_arrays(lat, self.caps, np.array(rows), np.array(coefs, dtype=complex))


def low_jet(f: TFPoly, modes=None) -> LowJet:
    """Matrix form of a weight <= 2 polynomial.

    Parameters
    ----------
    f : TFPoly
        Must contain only terms of weight at most two.
    modes : array_like, optional
        Fourier modes to allocate; defaults to the modes present in ``f``.
    """
    lat = f.lattice
    nA, nL = lat.n_tangential, lat.n_normal
    if f.nterms and f.weights().max() > 2:
        raise ContractError("low_jet expects a polynomial of weight at most two")
    if modes is None:
        modes = np.unique(f.k, axis=0) if f.nterms else np.zeros((0, nA), dtype=np.int64)
    jet = LowJet.empty(lat, f.caps, modes)
    if f.nterms == 0:
        return jet
    index = jet.mode_index()
    m_of = np.array([index.get(tuple(int(x) for x in k), -1) for k in f.k])
    if np.any(m_of < 0):
        raise ContractError("polynomial contains Fourier modes outside the requested set")
    to_i = zeta_to_interleaved(nL)
    R, B = f.alpha, f.beta
    dr, dz = R.sum(1), B.sum(1)
    c = f.coeffs
    sel = (dr == 0) & (dz == 0)
    np.add.at(jet.phi, m_of[sel], c[sel])
    sel = np.flatnonzero(dr == 1)
    if len(sel):
        a = R[sel].argmax(axis=1)
        np.add.at(jet.r, (m_of[sel], a), c[sel])
    sel = np.flatnonzero(dz == 1)
    if len(sel):
        j = to_i[B[sel].argmax(axis=1)]
        np.add.at(jet.z1, (m_of[sel], j), c[sel])
    sel = np.flatnonzero(dz == 2)
    if len(sel):
        Bs = B[sel]
        first = Bs.argmax(axis=1)
        square = Bs[np.arange(len(sel)), first] == 2
        rest = Bs.copy()
        rest[np.arange(len(sel)), first] -= 1
        second = rest.argmax(axis=1)
        i1, i2 = to_i[first], to_i[second]
        m = m_of[sel]
        val = np.where(square, 2.0 * c[sel], c[sel])
        np.add.at(jet.z2, (m, i1, i2), val)
        off = ~square
        np.add.at(jet.z2, (m[off], i2[off], i1[off]), val[off])
    return jet


def truncate_low_jet(f_low: TFPoly, cutoff: float, blocks=None, lattice_cutoff: float | None = None) -> TFPoly:
    """Fourier and lattice truncation of a weight <= 2 polynomial.

    Keeps modes with ``|k|_1 <= cutoff`` and restricts the quadratic part of
    every mode with :func:`nlskam.lattice.truncate_matrix` at
    ``lattice_cutoff`` (default ``cutoff``).  ``blocks`` is accepted for
    interface symmetry and is not needed by the truncation.
    """
    lattice_cutoff = cutoff if lattice_cutoff is None else lattice_cutoff
    from .lattice import LatticeMatrix, truncate_matrix

    if f_low.nterms and f_low.weights().max() > 2:
        raise ContractError("truncate_low_jet received terms of weight three or more")
    kept = f_low.select(f_low.k_norms() <= cutoff)
    quad = kept.z_degrees() == 2
    if not quad.any():
        return kept
    jet = low_jet(kept.select(quad))
    for m in range(len(jet.modes)):
        jet.z2[m] = truncate_matrix(LatticeMatrix(f_low.lattice, jet.z2[m]), lattice_cutoff).dense
    return kept.select(~quad) + jet.to_poly()


# --------------------------------------------------------------------------
# vector-field norms
# --------------------------------------------------------------------------

_SQRT_HALF = 1.0 / math.sqrt(2.0)


def _complex_images(lat, j):
    """Complex-coordinate images of doubled-set index ``j``: ``(u index, u factor, v index, v factor)``."""
    nL = lat.n_normal
    site = np.where(j < nL, j, j - nL)
    is_eta = j >= nL
    fu = np.where(is_eta, -1j * _SQRT_HALF, _SQRT_HALF)
    fv = np.where(is_eta, 1j * _SQRT_HALF, _SQRT_HALF)
    return 2 * site, fu, 2 * site + 1, fv


def _norm_parts(f: TFPoly, radii: DomainRadii, tame: bool) -> dict:
    """Per zeta-degree contributions ``{h: (r_part, phi_part, zeta_part)}``.

    The r and phi parts are the sup-type quantities before the ``1/mu``
    factor; the zeta part is before the ``1/sigma`` factor.
    """
    lat = f.lattice
    nA, nL = lat.n_tangential, lat.n_normal
    rho, mu, sigma = radii.rho, radii.mu, radii.sigma
    Wp = lat.interleaved_weights()
    W1 = lat.interleaved_weights(1.0)
    parts = {}
    if f.nterms == 0:
        return parts
    K = f.k
    A = f.alpha
    B = f.beta
    h = B.sum(axis=1)
    dr = A.sum(axis=1)
    base = np.abs(f.coeffs) * np.exp(np.abs(K).sum(axis=1) * rho)
    # r-derivative weight per tangential site and phi-derivative weight
    with np.errstate(divide="ignore"):
        mu_pow_r = np.where(dr > 0, mu ** (dr - 1.0), 0.0)
    r_w = A * mu_pow_r[:, None]
    phi_w = np.abs(K) * (mu**dr)[:, None]
    z_w = mu**dr

    # h = 0
    sel = h == 0
    if sel.any():
        r_part = (base[sel, None] * r_w[sel]).sum(axis=0).max()
        phi_part = (base[sel, None] * phi_w[sel]).sum(axis=0).max()
        parts[0] = (float(r_part), float(phi_part), 0.0)

    # h = 1, 2 in complex coordinates (exact sups of the modulus forms)
    n2 = 2 * nL
    for hh in (1, 2):
        sel = np.flatnonzero(h == hh)
        if len(sel) == 0:
            continue
        gkeys = np.concatenate([K[sel], A[sel]], axis=1)
        groups, gid = np.unique(gkeys, axis=0, return_inverse=True)
        gid = gid.reshape(-1)
        ng = len(groups)
        gK, gA = groups[:, :nA], groups[:, nA:]
        g_base = np.exp(np.abs(gK).sum(axis=1) * rho)
        g_dr = gA.sum(axis=1)
        with np.errstate(divide="ignore"):
            g_r = gA * np.where(g_dr > 0, mu ** (g_dr - 1.0), 0.0)[:, None]
        g_phi = np.abs(gK) * (mu**g_dr)[:, None]
        g_z = mu**g_dr
        c = f.coeffs[sel]
        Bs = B[sel]
        if hh == 1:
            j = Bs.argmax(axis=1)
            ui, fu, vi, fv = _complex_images(lat, j)
            key = np.concatenate([gid * n2 + ui, gid * n2 + vi])
            val = np.concatenate([c * fu, c * fv])
            uk, inv = np.unique(key, return_inverse=True)
            mod = np.abs(np.bincount(inv, val.real, len(uk)) + 1j * np.bincount(inv, val.imag, len(uk)))
            g_of, z_of = uk // n2, uk % n2
            vec_r = np.zeros((nA, n2))
            vec_phi = np.zeros((nA, n2))
            vec_z = np.zeros(n2)
            for a in range(nA):
                np.add.at(vec_r[a], z_of, mod * g_base[g_of] * g_r[g_of, a])
                np.add.at(vec_phi[a], z_of, mod * g_base[g_of] * g_phi[g_of, a])
            np.add.at(vec_z, z_of, mod * g_base[g_of] * g_z[g_of])
            probe = W1 if tame else Wp
            r_part = sigma * max(np.linalg.norm(vec_r[a] / probe) for a in range(nA))
            phi_part = sigma * max(np.linalg.norm(vec_phi[a] / probe) for a in range(nA))
            z_part = np.linalg.norm(vec_z * Wp)
            if tame:
                z_part = max(z_part, np.linalg.norm(vec_z * W1))
            parts[1] = (float(r_part), float(phi_part), float(z_part))
        else:
            first = Bs.argmax(axis=1)
            rest = Bs.copy()
            rest[np.arange(len(sel)), first] -= 1
            second = rest.argmax(axis=1)
            u1, fu1, v1, fv1 = _complex_images(lat, first)
            u2, fu2, v2, fv2 = _complex_images(lat, second)
            keys, vals = [], []
            for i1, f1 in ((u1, fu1), (v1, fv1)):
                for i2, f2 in ((u2, fu2), (v2, fv2)):
                    lo, hi = np.minimum(i1, i2), np.maximum(i1, i2)
                    keys.append((gid * n2 + lo) * n2 + hi)
                    vals.append(c * f1 * f2)
            key = np.concatenate(keys)
            val = np.concatenate(vals)
            uk, inv = np.unique(key, return_inverse=True)
            mod = np.abs(np.bincount(inv, val.real, len(uk)) + 1j * np.bincount(inv, val.imag, len(uk)))
            g_of = uk // (n2 * n2)
            lo = (uk // n2) % n2
            hi = uk % n2
            # symmetric matrix of the modulus form: z^T Q z
            entry = np.where(lo == hi, mod, 0.5 * mod)

            def form(weight_of_group):
                Q = np.zeros((n2, n2))
                w = entry * weight_of_group[g_of]
                np.add.at(Q, (lo, hi), w)
                off = lo != hi
                np.add.at(Q, (hi[off], lo[off]), w[off])
                return Q

            probe = W1 if tame else Wp
            r_part = 0.0
            phi_part = 0.0
            for a in range(nA):
                Qr = form(g_base * g_r[:, a])
                Qp = form(g_base * g_phi[:, a])
                r_part = max(r_part, sigma**2 * np.linalg.norm(Qr / np.outer(probe, probe), 2))
                phi_part = max(phi_part, sigma**2 * np.linalg.norm(Qp / np.outer(probe, probe), 2))
            Qz = 2.0 * form(g_base * g_z)
            z_part = sigma * np.linalg.norm(Wp[:, None] * Qz / Wp[None, :], 2)
            if tame:
                z_part = max(z_part, sigma * np.linalg.norm(W1[:, None] * Qz / W1[None, :], 2))
            parts[2] = (float(r_part), float(phi_part), float(z_part))

    # h >= 3: monomial majorants
    logWp = np.log(lat.site_weights())
    logW1 = np.log(lat.site_weights(1.0))
    logWp2 = np.concatenate([logWp, logWp])
    logW12 = np.concatenate([logW1, logW1])
    for hh in np.unique(h[h >= 3]):
        sel = np.flatnonzero(h == hh)
        Bs = B[sel].astype(float)
        probe_log = logW12 if tame else logWp2
        damp = np.exp(-(Bs @ probe_log))
        b0 = base[sel] * damp
        r_part = sigma**hh * (b0[:, None] * r_w[sel]).sum(axis=0).max()
        phi_part = sigma**hh * (b0[:, None] * phi_w[sel]).sum(axis=0).max()
        # gradient component j carries beta_j and the output weight <j>^p
        zmass = (b0 * z_w[sel])[:, None] * Bs
        out_p = np.exp(logWp2)
        if tame:
            vec_p = (zmass * (np.exp(logW12) * out_p)[None, :]).sum(axis=0)
            vec_1 = (zmass * np.exp(2 * logW12)[None, :]).sum(axis=0)
            z_part = sigma ** (hh - 1) * max(np.linalg.norm(vec_p), np.linalg.norm(vec_1))
        else:
            vec = (zmass * (out_p * out_p)[None, :]).sum(axis=0)
            z_part = sigma ** (hh - 1) * np.linalg.norm(vec)
        parts[int(hh)] = (float(r_part), float(phi_part), float(z_part))
    return parts


def _total(parts: dict, radii: DomainRadii) -> float:
    return float(sum(r + p / radii.mu + z / radii.sigma for r, p, z in parts.values()))


def vf_weighted_norm(f: TFPoly, radii: DomainRadii) -> float:
    """Computable majorant of ``sup |f_r| + |f_phi|/mu + ||f_zeta||_p/sigma`` over the domain.

    Tangential vectors are measured in the max norm.  Parts of zeta-degree
    one and two are exact suprema of the coefficient-modulus forms (computed
    in complex coordinates); higher degrees use monomial-wise bounds.
    """
    return _total(_norm_parts(f, radii, tame=False), radii)


def vf_ptame_norm(f: TFPoly, radii: DomainRadii) -> float:
    """The p-tame vector-field norm (exact for zeta-degree <= 2, majorant above)."""
    return _total(_norm_parts(f, radii, tame=True), radii)


def ptame_components(f: TFPoly, radii: DomainRadii) -> dict:
    """Unscaled ``r``, ``phi`` and ``zeta`` parts of the p-tame norm summed over zeta-degrees."""
    parts = _norm_parts(f, radii, tame=True)
    return {
        "r": float(sum(v[0] for v in parts.values())),
        "phi": float(sum(v[1] for v in parts.values())),
        "zeta": float(sum(v[2] for v in parts.values())),
    }


# --------------------------------------------------------------------------
# text serialization
# --------------------------------------------------------------------------


def _fmt_ints(xs) -> str:
    return ",".join(str(int(x)) for x in xs)


def dumps(f: TFPoly) -> str:
    """One line per monomial, sorted lexicographically by ``(k, alpha, beta)``."""
    header = f"# caps k_max={f.caps.k_max} deg_r={f.caps.deg_r} deg_z={f.caps.deg_z} terms={f.nterms}"
    entries = []
    for idx, c in f.terms():
        entries.append((idx.k, idx.alpha, idx.beta, c))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    lines = [header]
    for k, alpha, beta, c in entries:
        beta_s = ",".join(f"{j}:{d}" for j, d in beta)
        lines.append(f"k={_fmt_ints(k)} alpha={_fmt_ints(alpha)} beta={beta_s} re={c.real!r} im={c.imag!r}")
    return "\n".join(lines) + "\n"


def _parse_ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",")) if s else ()


def loads(text: str, lattice: LatticeConfig, caps: Caps | None = None) -> TFPoly:
    """Inverse of :func:`dumps`; caps default to those recorded in the header."""
    terms = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if caps is None and "k_max=" in line:
                fields = dict(tok.split("=") for tok in line[1:].split() if "=" in tok)
                caps = Caps(int(fields["k_max"]), int(fields["deg_r"]), int(fields["deg_z"]))
            continue
        fields = dict(tok.split("=", 1) for tok in line.split())
        try:
            k = _parse_ints(fields["k"])
            alpha = _parse_ints(fields["alpha"])
            beta = tuple(tuple(int(x) for x in p.split(":")) for p in fields["beta"].split(",") if p)
            c = complex(float(fields["re"]), float(fields["im"]))
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"malformed polynomial line: {line!r}") from exc
        terms.append(((k, alpha, beta), c))
    if caps is None:
        raise ConfigurationError("caps missing from header and not supplied")
    return TFPoly.from_terms(lattice, caps, terms)
