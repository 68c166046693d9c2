"""Non-resonance conditions on a parameter grid and excluded-fraction estimates."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .errors import ConfigurationError, ContractError
from .lattice import BlockDecomposition, NormalForm, coarsen_blocks, spectrum_by_site

__all__ = [
    "ParameterGrid",
    "Verdict",
    "fourier_modes",
    "check_conditions",
    "carve",
    "excluded_fraction_sweep",
    "fit_measure_exponent",
]

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def fourier_modes(n: int, cutoff: float) -> np.ndarray:
    """All ``k`` in ``Z^n`` with ``0 < |k|_1 <= cutoff``, in lexicographic order."""
    kmax = int(math.floor(cutoff + 1e-9))
    if kmax < 1 or n == 0:
        return np.zeros((0, n), dtype=np.int64)
    ks = np.array(list(itertools.product(range(-kmax, kmax + 1), repeat=n)), dtype=np.int64)
    l1 = np.abs(ks).sum(axis=1)
    return ks[(l1 > 0) & (l1 <= kmax)]


# --------------------------------------------------------------------------
# grid
# --------------------------------------------------------------------------


@dataclass
class ParameterGrid:
    """Sample points of ``[-1, 1]^n`` with a monotone survival mask.

    Attributes
    ----------
    points : ndarray, shape (N, n)
    alive : ndarray of bool
    history : list
        ``None`` for live points, otherwise the exclusion record
        ``{"iteration", "condition", "k", "blocks", "value"}``.
    iteration : int
        Number of carving passes applied so far.
    """

    points: np.ndarray
    alive: np.ndarray = None
    history: list = None
    iteration: int = 0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.alive is None:
            self.alive = np.ones(len(self.points), dtype=bool)
        if self.history is None:
            self.history = [None] * len(self.points)
        if np.any(np.abs(self.points) > 1.0):
            raise ConfigurationError("parameter points must lie in [-1, 1]^n")

    @classmethod
    def uniform(cls, n: int, per_axis: int = 21) -> "ParameterGrid":
        """Tensor grid with ``per_axis`` cells per axis.

        Axis ``i`` is shifted inside its cells by the fractional part of
        ``sqrt(p_i)`` (``p_i`` the ``i``-th prime); these offsets are
        rationally independent, so no grid point sits on an integer
        frequency relation.
        """
        if n > len(_PRIMES):
            raise ConfigurationError("tensor grids are limited to twelve axes")
        axes = []
        for axis in range(n):
            theta = math.sqrt(_PRIMES[axis]) % 1.0
            axes.append(-1.0 + (np.arange(per_axis) + theta) * 2.0 / per_axis)
        pts = np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, n)
        return cls(pts)

    @classmethod
    def sobol(cls, n: int, m: int = 9, seed: int = 0) -> "ParameterGrid":
        """Scrambled Sobol sample of ``2**m`` points."""
        sample = qmc.Sobol(d=n, scramble=True, seed=seed).random_base2(m)
        return cls(2.0 * sample - 1.0)

    @classmethod
    def default(cls, n: int, seed: int = 0) -> "ParameterGrid":
        return cls.uniform(n) if n <= 2 else cls.sobol(n, seed=seed)

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    @property
    def excluded_fraction(self) -> float:
        return 1.0 - self.n_alive / len(self.points)

    def survivors(self) -> np.ndarray:
        return np.flatnonzero(self.alive)

    def copy(self) -> "ParameterGrid":
        return ParameterGrid(self.points.copy(), self.alive.copy(), list(self.history), self.iteration)

    def kill(self, index: int, record: dict):
        if not self.alive[index]:
            return
        self.alive[index] = False
        self.history[index] = dict(record, iteration=self.iteration)

    def to_csv(self, margins=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        n = self.points.shape[1]
        writer.writerow([f"w{i}" for i in range(n)] + ["alive", "min_margin", "witness"])
        for i, w in enumerate(self.points):
            rec = self.history[i]
            witness = "" if rec is None else f"{rec['condition']}:k={rec['k']}:blocks={rec['blocks']}"
            margin = "" if margins is None else f"{margins[i]:.6e}"
            writer.writerow([f"{x:.12g}" for x in w] + [int(self.alive[i]), margin, witness])
        return buf.getvalue()


# --------------------------------------------------------------------------
# conditions
# --------------------------------------------------------------------------


@dataclass
class Verdict:
    """Outcome of the four non-resonance checks at one parameter point.

    ``margin`` is the smallest ``|divisor| - kappa`` over all checks; the
    witness names the condition, mode and blocks where it is attained.
    """

    passed: bool
    margin: float
    witness: dict | None
    minima: dict = field(default_factory=dict)


def _nearest(sorted_vals: np.ndarray, targets: np.ndarray):
    """Distance from each target to the sorted set and the index attaining it."""
    if len(sorted_vals) == 0:
        return np.full(len(targets), np.inf), np.zeros(len(targets), dtype=np.int64)
    pos = np.searchsorted(sorted_vals, targets)
    lo = np.clip(pos - 1, 0, len(sorted_vals) - 1)
    hi = np.clip(pos, 0, len(sorted_vals) - 1)
    dlo = np.abs(targets - sorted_vals[lo])
    dhi = np.abs(targets - sorted_vals[hi])
    use_hi = dhi < dlo
    return np.where(use_hi, dhi, dlo), np.where(use_hi, hi, lo)


def _pair_table(mu, block_of, pairs, sign):
    """Sorted values ``mu_i + sign * mu_j`` over site pairs in allowed block pairs."""
    n = len(mu)
    i, j = np.triu_indices(n) if sign > 0 else np.indices((n, n)).reshape(2, -1)
    keep = pairs[block_of[i], block_of[j]]
    i, j = i[keep], j[keep]
    vals = mu[i] + sign * mu[j]
    order = np.argsort(vals, kind="stable")
    return vals[order], block_of[i][order], block_of[j][order]


def check_conditions(w, nf: NormalForm, blocks: BlockDecomposition, sp) -> Verdict:
    """Evaluate the four non-resonance conditions at ``w``.

    For every ``0 < |k|_1 <= sp.delta_prime`` with ``lam = <k, omega>``:

    - ``|lam| >= kappa``;
    - ``|lam + a| >= kappa`` for every eigenvalue ``a``;
    - ``|lam + a + b| >= kappa`` for every eigenvalue pair;
    - ``|lam + a - b| >= kappa`` for eigenvalues of blocks whose minimum
      site distance is at most ``lattice_cutoff + 2 d_Delta``.

    Eigenvalues are those of the Hermitian form of ``Omega + H`` on
    ``blocks`` coarsened with the support of ``H``.  ``sp`` only needs the
    attributes ``kappa`` and ``delta_prime``; an optional
    ``lattice_cutoff`` (default ``delta_prime``) sets the site-distance range.
    """
    del w  # the normal form already encodes the parameter point
    kappa = float(sp.kappa)
    eff = coarsen_blocks(blocks, nf.H.site_pattern())
    mu, _ = spectrum_by_site(nf, eff)
    ks = fourier_modes(nf.lattice.n_tangential, sp.delta_prime)
    if len(ks) == 0:
        return Verdict(True, math.inf, None, {})
    lam = ks.astype(float) @ nf.omega
    all_pairs = np.ones((eff.n_blocks, eff.n_blocks), dtype=bool)
    lattice_cutoff = getattr(sp, "lattice_cutoff", None) or sp.delta_prime
    near = eff.distance_matrix() <= lattice_cutoff + 2.0 * eff.diameter + 1e-9
    order = np.argsort(mu, kind="stable")
    tables = {
        "sd2": (mu[order], eff.block_of[order], None),
        "sd3": _pair_table(mu, eff.block_of, all_pairs, +1),
        "sd4": _pair_table(mu, eff.block_of, near, -1),
    }
    minima = {}
    best = (math.inf, None)
    d1 = np.abs(lam)
    i = int(np.argmin(d1))
    minima["sd1"] = float(d1[i])
    best = (d1[i], {"condition": "sd1", "k": ks[i].tolist(), "blocks": [], "value": float(d1[i])})
    for name, (vals, bi, bj) in tables.items():
        dist, where = _nearest(vals, -lam)
        i = int(np.argmin(dist))
        minima[name] = float(dist[i])
        if dist[i] < best[0]:
            blk = [int(bi[where[i]])] if bj is None else [int(bi[where[i]]), int(bj[where[i]])]
            best = (dist[i], {"condition": name, "k": ks[i].tolist(), "blocks": blk, "value": float(dist[i])})
    margin = float(best[0]) - kappa
    return Verdict(margin >= 0.0, margin, best[1], minima)


def carve(grid: ParameterGrid, nf_builder, blocks: BlockDecomposition, sp):
    """Kill grid points failing :func:`check_conditions`.

    Returns
    -------
    grid : ParameterGrid
        A new grid; points already dead stay dead.
    excluded_fraction : float
    margins : ndarray
        Margin at every point (``nan`` where not evaluated).
    """
    if len(grid.points) == 0:
        raise ContractError("cannot carve an empty grid")
    out = grid.copy()
    out.iteration += 1
    margins = np.full(len(out.points), np.nan)
    for idx in out.survivors():
        verdict = check_conditions(out.points[idx], nf_builder(out.points[idx]), blocks, sp)
        margins[idx] = verdict.margin
        if not verdict.passed:
            out.kill(int(idx), verdict.witness)
    return out, out.excluded_fraction, margins


def excluded_fraction_sweep(grid: ParameterGrid, nf_builder, blocks, delta_prime: float, kappas) -> dict:
    """Excluded fraction for every ``kappa`` from a single margin evaluation.

    A point survives floor ``kappa`` exactly when its minimum divisor is at
    least ``kappa``, so one evaluation at ``kappa -> 0`` serves all floors.
    """

    class _Probe:
        kappa = 0.0

    _Probe.delta_prime = delta_prime
    values = np.array([
        check_conditions(w, nf_builder(w), blocks, _Probe).margin for w in grid.points
    ])
    return {
        "min_divisor": values,
        "survivors": {float(k): values >= k for k in kappas},
        "excluded_fraction": {float(k): float(np.mean(values < k)) for k in kappas},
    }


def fit_measure_exponent(kappas, fractions) -> float | None:
    """Least-squares slope of ``log(fraction)`` against ``log(kappa)`` over positive fractions."""
    k = np.asarray(kappas, dtype=float)
    f = np.asarray(fractions, dtype=float)
    keep = (f > 0) & (k > 0)
    if keep.sum() < 2:
        return None
    slope, _ = np.polyfit(np.log(k[keep]), np.log(f[keep]), 1)
    return float(slope)


def summary_json(sweep: dict, exponent: float | None = None) -> str:
    return json.dumps(
        {
            "excluded_fraction": {str(k): v for k, v in sweep["excluded_fraction"].items()},
            "fitted_exponent": exponent,
        },
        indent=1,
    )
