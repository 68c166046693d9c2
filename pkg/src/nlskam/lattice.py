"""Block decompositions of the normal lattice and 2x2-block lattice matrices."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .algebra import Caps, LatticeConfig, TFPoly
from .errors import ContractError, InvariantViolation

__all__ = [
    "BlockDecomposition",
    "LatticeMatrix",
    "NormalForm",
    "AssumptionReport",
    "build_blocks",
    "pi_project",
    "matrix_gamma_norm",
    "truncate_matrix",
    "conjugate_to_complex",
    "conjugate_from_complex",
    "hermitian_form",
    "real_from_hermitian",
    "coarsen_blocks",
    "spectrum_by_site",
    "block_spectrum",
    "check_assumptions",
]

_CONJ = np.array([[1.0, 1.0], [-1j, 1j]]) / math.sqrt(2.0)
_CONJ_INV = np.linalg.inv(_CONJ)
_DIST_TOL = 1e-9


# --------------------------------------------------------------------------
# blocks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockDecomposition:
    """Partition of the normal sites into blocks.

    Attributes
    ----------
    delta : float
        Chain step used to build the partition.
    blocks : tuple of tuple of int
        Normal-site indices of each block, blocks ordered by their first site.
    block_of : ndarray of int
        Block id of every normal site.
    diameter : float
        Largest Euclidean diameter over all blocks.
    boundary : tuple of bool
        Whether the block may be cut by the finite box.
    """

    lattice: LatticeConfig
    delta: float
    blocks: tuple
    block_of: np.ndarray = field(repr=False)
    diameter: float
    block_diameters: tuple = field(repr=False)
    boundary: tuple = field(repr=False)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def sq_norm(self, block_id: int) -> int:
        return int(self.lattice.normal_sq_norms[self.blocks[block_id][0]])

    def indicator(self) -> np.ndarray:
        """Site-by-block 0/1 matrix."""
        ind = np.zeros((self.lattice.n_normal, self.n_blocks))
        ind[np.arange(self.lattice.n_normal), self.block_of] = 1.0
        return ind

    def distance_matrix(self) -> np.ndarray:
        """Minimum Euclidean site distance between every pair of blocks."""
        pts = self.lattice.normal_array.astype(float)
        dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        nb = self.n_blocks
        out = np.full((nb, nb), np.inf)
        for i, bi in enumerate(self.blocks):
            sub = dist[list(bi)]
            for j, bj in enumerate(self.blocks):
                out[i, j] = sub[:, list(bj)].min()
        return out

    def report(self) -> list:
        sites = self.lattice.normal_sites
        return [
            {
                "sites": [list(sites[i]) for i in blk],
                "sq_norm": self.sq_norm(b),
                "diameter": self.block_diameters[b],
                "boundary_flag": bool(self.boundary[b]),
            }
            for b, blk in enumerate(self.blocks)
        ]

    def report_json(self) -> str:
        return json.dumps({"delta": self.delta, "d_delta": self.diameter, "blocks": self.report()}, indent=1)


def _from_labels(lattice, delta, labels, boundary_sites) -> BlockDecomposition:
    n = lattice.n_normal
    order = {}
    for i in range(n):
        order.setdefault(int(labels[i]), []).append(i)
    blocks = tuple(tuple(v) for v in sorted(order.values(), key=lambda v: v[0]))
    block_of = np.empty(n, dtype=np.int64)
    for b, blk in enumerate(blocks):
        block_of[list(blk)] = b
    pts = lattice.normal_array.astype(float)
    diams = []
    for blk in blocks:
        p = pts[list(blk)]
        diams.append(float(np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1)).max()) if len(blk) > 1 else 0.0)
    flags = tuple(bool(np.any(boundary_sites[list(blk)])) for blk in blocks)
    block_of.setflags(write=False)
    return BlockDecomposition(
        lattice, float(delta), blocks, block_of, max(diams) if diams else 0.0, tuple(diams), flags
    )


def _boundary_sites(lattice: LatticeConfig, delta: float) -> np.ndarray:
    """Sites having a same-norm partner outside the box within ``delta``."""
    R, d = lattice.box_radius, lattice.d
    tset = set(lattice.tangential_sites)
    step = int(math.floor(delta + _DIST_TOL))
    offsets = np.array(list(itertools.product(range(-step, step + 1), repeat=d)), dtype=np.int64)
    offsets = offsets[(offsets**2).sum(1) <= delta * delta + _DIST_TOL]
    flags = np.zeros(lattice.n_normal, dtype=bool)
    if step == 0:
        return flags
    for i, a in enumerate(lattice.normal_array):
        cand = a[None, :] + offsets
        same = (cand**2).sum(1) == (a**2).sum()
        outside = np.abs(cand).max(1) > R
        for c in cand[same & outside]:
            if tuple(int(x) for x in c) not in tset:
                flags[i] = True
                break
    return flags


def build_blocks(lattice: LatticeConfig, delta: float) -> BlockDecomposition:
    """Closure of ``|a| = |b|`` and ``|a - b| <= delta`` on the normal sites.

    Parameters
    ----------
    lattice : LatticeConfig
    delta : float
        Nonnegative chain step (Euclidean distance).
    """
    if delta < 0:
        raise ContractError("block scale must be nonnegative")
    pts = lattice.normal_array
    sq = lattice.normal_sq_norms
    n = lattice.n_normal
    rows, cols = [], []
    for value in np.unique(sq):
        shell = np.flatnonzero(sq == value)
        if len(shell) < 2:
            continue
        p = pts[shell].astype(float)
        dist2 = ((p[:, None] - p[None]) ** 2).sum(-1)
        i, j = np.nonzero(dist2 <= delta * delta + _DIST_TOL)
        rows.append(shell[i])
        cols.append(shell[j])
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = c = np.zeros(0, dtype=np.int64)
    graph = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return _from_labels(lattice, delta, labels, _boundary_sites(lattice, delta))


def coarsen_blocks(blocks: BlockDecomposition, couplings: np.ndarray, tol: float = 0.0) -> BlockDecomposition:
    """Merge blocks linked by nonzero entries of a site-by-site coupling pattern."""
    lat = blocks.lattice
    n = lat.n_normal
    mag = np.abs(couplings)
    r, c = np.nonzero(mag > tol)
    same_r = np.arange(n)
    rep = np.array([blk[0] for blk in blocks.blocks])[blocks.block_of]
    rows = np.concatenate([r, same_r])
    cols = np.concatenate([c, rep])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    boundary = np.zeros(n, dtype=bool)
    for b, blk in enumerate(blocks.blocks):
        if blocks.boundary[b]:
            boundary[list(blk)] = True
    return _from_labels(lat, blocks.delta, labels, boundary)


# --------------------------------------------------------------------------
# lattice matrices
# --------------------------------------------------------------------------


class LatticeMatrix:
    """Matrix of 2x2 blocks indexed by pairs of normal sites.

    Stored densely as a ``(2n, 2n)`` complex array in interleaved
    ``(site, component)`` order; block ``(a, b)`` is
    ``dense[2a:2a+2, 2b:2b+2]``.
    """

    __slots__ = ("lattice", "dense")

    def __init__(self, lattice: LatticeConfig, dense=None):
        n2 = 2 * lattice.n_normal
        self.lattice = lattice
        self.dense = np.zeros((n2, n2), dtype=complex) if dense is None else np.array(dense, dtype=complex)
        if self.dense.shape != (n2, n2):
            raise ContractError("lattice matrix has the wrong shape")

    @classmethod
    def from_blocks(cls, lattice, entries: dict) -> "LatticeMatrix":
        m = cls(lattice)
        for (a, b), blk in entries.items():
            m.dense[2 * a : 2 * a + 2, 2 * b : 2 * b + 2] = np.asarray(blk, dtype=complex)
        return m

    @classmethod
    def zeros(cls, lattice) -> "LatticeMatrix":
        return cls(lattice)

    def blocks4(self) -> np.ndarray:
        """View as an ``(n, 2, n, 2)`` array."""
        n = self.lattice.n_normal
        return self.dense.reshape(n, 2, n, 2)

    def block(self, a: int, b: int) -> np.ndarray:
        return self.dense[2 * a : 2 * a + 2, 2 * b : 2 * b + 2]

    def entries(self, tol: float = 0.0) -> dict:
        """Nonzero 2x2 blocks keyed by site-index pairs."""
        mags = np.abs(self.blocks4()).max(axis=(1, 3))
        return {(int(a), int(b)): self.block(a, b).copy() for a, b in zip(*np.nonzero(mags > tol))}

    def site_pattern(self) -> np.ndarray:
        """Largest block-entry magnitude for each site pair."""
        return np.abs(self.blocks4()).max(axis=(1, 3))

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        return bool(np.abs(self.dense - self.dense.T).max(initial=0.0) <= tol)

    def is_real(self, tol: float = 1e-12) -> bool:
        return bool(np.abs(self.dense.imag).max(initial=0.0) <= tol)

    def norm(self) -> float:
        """Spectral norm of the full matrix."""
        return float(np.linalg.norm(self.dense, 2)) if self.dense.size else 0.0

    def __add__(self, other: "LatticeMatrix") -> "LatticeMatrix":
        return LatticeMatrix(self.lattice, self.dense + other.dense)

    def __sub__(self, other: "LatticeMatrix") -> "LatticeMatrix":
        return LatticeMatrix(self.lattice, self.dense - other.dense)

    def scale(self, c) -> "LatticeMatrix":
        return LatticeMatrix(self.lattice, self.dense * c)

    def copy(self) -> "LatticeMatrix":
        return LatticeMatrix(self.lattice, self.dense)

    def __repr__(self):
        return f"LatticeMatrix(n_sites={self.lattice.n_normal}, nonzero_blocks={len(self.entries())})"


def _pi_blocks(B4: np.ndarray) -> np.ndarray:
    a, b = B4[:, 0, :, 0], B4[:, 0, :, 1]
    c, d = B4[:, 1, :, 0], B4[:, 1, :, 1]
    out = np.empty_like(B4)
    s = 0.5 * (a + d)
    t = 0.5 * (b - c)
    out[:, 0, :, 0] = s
    out[:, 1, :, 1] = s
    out[:, 0, :, 1] = t
    out[:, 1, :, 0] = -t
    return out


def pi_project(A: LatticeMatrix) -> tuple[LatticeMatrix, LatticeMatrix]:
    """Split every block into its ``[[s, t], [-t, s]]`` part and the remainder."""
    n2 = A.dense.shape[0]
    P = _pi_blocks(A.blocks4()).reshape(n2, n2)
    return LatticeMatrix(A.lattice, P), LatticeMatrix(A.lattice, A.dense - P)


def _site_distances(lattice: LatticeConfig, sign: int) -> np.ndarray:
    pts = lattice.normal_array.astype(float)
    return np.sqrt(((pts[:, None, :] + sign * pts[None, :, :]) ** 2).sum(-1))


def matrix_gamma_norm(A: LatticeMatrix, gamma: float) -> float:
    """Exponentially weighted decay norm of a lattice matrix.

    The projected part is weighted by ``exp(gamma |a - b|)`` and the
    remainder by ``exp(gamma |a + b|)``; each weighted matrix of entrywise
    absolute values is measured in operator norm and the larger is returned.
    """
    if gamma < 0:
        raise ContractError("gamma must be nonnegative")
    P, Q = pi_project(A)
    lat = A.lattice
    wm = np.repeat(np.repeat(np.exp(gamma * _site_distances(lat, -1)), 2, 0), 2, 1)
    wp = np.repeat(np.repeat(np.exp(gamma * _site_distances(lat, +1)), 2, 0), 2, 1)
    vals = [0.0]
    for M, w in ((P, wm), (Q, wp)):
        mod = np.abs(M.dense) * w
        if mod.any():
            vals.append(float(np.linalg.norm(mod, 2)))
    return max(vals)


def truncate_matrix(A: LatticeMatrix, delta: float) -> LatticeMatrix:
    """Keep the projected part where ``|a - b| <= delta`` and the remainder where ``|a + b| <= delta``."""
    if delta < 0:
        raise ContractError("truncation scale must be nonnegative")
    P, Q = pi_project(A)
    lat = A.lattice
    keep_m = np.repeat(np.repeat(_site_distances(lat, -1) <= delta + _DIST_TOL, 2, 0), 2, 1)
    keep_p = np.repeat(np.repeat(_site_distances(lat, +1) <= delta + _DIST_TOL, 2, 0), 2, 1)
    return LatticeMatrix(lat, np.where(keep_m, P.dense, 0) + np.where(keep_p, Q.dense, 0))


def _blockwise(A: LatticeMatrix, left: np.ndarray, right: np.ndarray) -> LatticeMatrix:
    B4 = A.blocks4()
    out = np.einsum("ij,ajbk,kl->aibl", left, B4, right)
    return LatticeMatrix(A.lattice, out.reshape(A.dense.shape))


def conjugate_to_complex(A: LatticeMatrix) -> LatticeMatrix:
    """Entrywise ``C^T A_ab C`` with ``C = [[1, 1], [-i, i]] / sqrt(2)``."""
    return _blockwise(A, _CONJ.T, _CONJ)


def conjugate_from_complex(A: LatticeMatrix) -> LatticeMatrix:
    """Inverse of :func:`conjugate_to_complex`."""
    return _blockwise(A, _CONJ_INV.T, _CONJ_INV)


def hermitian_form(A: LatticeMatrix) -> np.ndarray:
    """The ``(n, n)`` matrix ``Q`` with ``0.5 <z, C^T A C z> = <u, Q v>`` for a normal-form ``A``."""
    Z = conjugate_to_complex(A).blocks4()
    return Z[:, 0, :, 1]


def real_from_hermitian(lattice: LatticeConfig, Q: np.ndarray) -> LatticeMatrix:
    """Normal-form real matrix whose complex form is the Hermitian ``Q``."""
    n = lattice.n_normal
    B4 = np.zeros((n, 2, n, 2), dtype=complex)
    B4[:, 0, :, 0] = Q.real
    B4[:, 1, :, 1] = Q.real
    B4[:, 0, :, 1] = Q.imag
    B4[:, 1, :, 0] = -Q.imag
    return LatticeMatrix(lattice, B4.reshape(2 * n, 2 * n))


# --------------------------------------------------------------------------
# normal forms
# --------------------------------------------------------------------------

DEFAULT_CONSTANTS = {"c1": 1.0, "c2": 1.0, "c3": 0.5, "c4": 1.0, "c5": 1.0}


@dataclass
class NormalForm:
    """Integrable part ``<omega, r> + 0.5 <zeta, (Omega + H) zeta>``.

    Attributes
    ----------
    omega : ndarray
        Tangential frequencies.
    Omega : ndarray
        Normal frequencies (diagonal part).
    H : LatticeMatrix
        Real symmetric normal-form correction.
    delta : float
        Block scale over which ``H`` is block diagonal.
    constants : dict
        Assumption constants ``c1`` .. ``c5``.
    """

    lattice: LatticeConfig
    omega: np.ndarray
    Omega: np.ndarray
    H: LatticeMatrix
    delta: float = 0.0
    constants: dict = field(default_factory=lambda: dict(DEFAULT_CONSTANTS))

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(self.lattice.n_tangential)
        self.Omega = np.asarray(self.Omega, dtype=float).reshape(self.lattice.n_normal)
        if self.H is None:
            self.H = LatticeMatrix.zeros(self.lattice)

    def hermitian(self) -> np.ndarray:
        """Complex form ``Q = diag(Omega) + H_c`` (Hermitian)."""
        return np.diag(self.Omega).astype(complex) + hermitian_form(self.H)

    def real_matrix(self) -> np.ndarray:
        """Real interleaved matrix of the quadratic part."""
        return np.diag(np.repeat(self.Omega, 2)).astype(complex) + self.H.dense

    def as_poly(self, caps: Caps) -> TFPoly:
        from .algebra import LowJet

        jet = LowJet.empty(self.lattice, caps, np.zeros((1, self.lattice.n_tangential), dtype=np.int64))
        jet.r[0] = self.omega
        jet.z2[0] = self.real_matrix()
        return jet.to_poly()

    def updated(self, d_omega=None, d_H: LatticeMatrix | None = None, delta=None) -> "NormalForm":
        omega = self.omega + (0 if d_omega is None else np.real(np.asarray(d_omega)))
        H = self.H if d_H is None else LatticeMatrix(self.lattice, (self.H.dense + d_H.dense).real)
        return NormalForm(
            self.lattice, omega, self.Omega.copy(), H, self.delta if delta is None else delta, dict(self.constants)
        )


def block_spectrum(nf: NormalForm, blocks: BlockDecomposition, block_id: int) -> np.ndarray:
    """Sorted eigenvalues of the Hermitian block of ``Omega + H``."""
    Q = nf.hermitian()
    idx = list(blocks.blocks[block_id])
    outside = np.ones(nf.lattice.n_normal, dtype=bool)
    outside[idx] = False
    if np.abs(Q[np.ix_(idx, np.flatnonzero(outside))]).max(initial=0.0) > 1e-12:
        raise ContractError("H couples this block to sites outside it")
    sub = Q[np.ix_(idx, idx)]
    if np.abs(sub - sub.conj().T).max(initial=0.0) > 1e-10:
        raise InvariantViolation("block is not Hermitian after conjugation")
    return np.sort(np.linalg.eigvalsh(0.5 * (sub + sub.conj().T)))


def spectrum_by_site(nf: NormalForm, blocks: BlockDecomposition) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of ``Q`` done block by block.

    Returns ``(eigenvalues, U)`` where the eigenvalues are placed at the site
    slots of their block and ``U`` is block-diagonal unitary with
    ``Q = U diag(eigenvalues) U^H``.
    """
    Q = nf.hermitian()
    n = nf.lattice.n_normal
    vals = np.zeros(n)
    U = np.zeros((n, n), dtype=complex)
    for blk in blocks.blocks:
        idx = list(blk)
        sub = Q[np.ix_(idx, idx)]
        if np.abs(sub - sub.conj().T).max(initial=0.0) > 1e-10:
            raise InvariantViolation("block is not Hermitian after conjugation")
        w, V = np.linalg.eigh(0.5 * (sub + sub.conj().T))
        vals[idx] = w
        U[np.ix_(idx, idx)] = V
    return vals, U


@dataclass
class AssumptionReport:
    """Margins of the frequency assumptions; positive means satisfied."""

    margins: dict
    notes: dict

    @property
    def passed(self) -> bool:
        return all(v is None or v >= 0 for v in self.margins.values())

    def failed(self) -> list:
        return [k for k, v in self.margins.items() if v is not None and v < 0]


def check_assumptions(nf: NormalForm) -> AssumptionReport:
    """Evaluate the frequency assumptions at the stored constants."""
    c = nf.constants
    lat = nf.lattice
    Om = nf.Omega
    norms = np.sqrt(lat.normal_sq_norms.astype(float))
    margins, notes = {}, {}
    margins["as1"] = 0.0
    margins["as2"] = 0.0
    notes["as1"] = notes["as2"] = "satisfied by construction: frequencies depend on w with unit slope"
    margins["as3"] = float(np.min(c["c1"] * np.exp(-c["c2"] * norms) - np.abs(Om - lat.normal_sq_norms)))
    margins["as4"] = float(np.min(np.abs(Om)) - c["c3"])
    margins["as5"] = float(np.min(np.abs(Om[:, None] + Om[None, :])) - c["c3"])
    diff = np.abs(Om[:, None] - Om[None, :])
    distinct = lat.normal_sq_norms[:, None] != lat.normal_sq_norms[None, :]
    margins["as6"] = float(diff[distinct].min() - c["c3"]) if distinct.any() else math.inf
    margins["as7"] = float(c["c3"] / 4 - nf.H.norm())
    margins["as8"] = float(c["c4"])
    notes["as8"] = "H is computed at a fixed parameter point, so its w-derivative is not tracked"
    margins["as9"] = None
    notes["as9"] = "Lipschitz seminorm of H is not computed"
    return AssumptionReport(margins, notes)
