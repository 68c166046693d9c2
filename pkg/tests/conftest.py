import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nlskam.algebra import Caps, DomainRadii, LatticeConfig, TFPoly, vf_weighted_norm

settings.register_profile(
    "nlskam",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("nlskam")

RADII = DomainRadii(0.5, 0.25, 0.5)
DESK_OMEGA = np.array([0.15798182, 0.88119679])


def random_poly(lat, caps, rng, n_terms=40, k_range=2, max_weight=4, z_sites=None, real=True):
    """Random polynomial with terms of weight <= max_weight inside ``caps``."""
    nA, nL = lat.n_tangential, lat.n_normal
    z_sites = 2 * nL if z_sites is None else z_sites
    rows, coeffs = [], []
    while len(rows) < n_terms:
        k = rng.integers(-k_range, k_range + 1, size=nA)
        if np.abs(k).sum() > caps.k_max:
            continue
        alpha = np.zeros(nA, dtype=int)
        beta = np.zeros(2 * nL, dtype=int)
        weight = int(rng.integers(0, max_weight + 1))
        if weight >= 2 and caps.deg_r > 0 and rng.random() < 0.4:
            alpha[rng.integers(nA)] = 1
            weight -= 2
        if weight > caps.deg_z:
            continue
        for _ in range(weight):
            beta[rng.integers(z_sites)] += 1
        rows.append(np.concatenate([k, alpha, beta]))
        coeffs.append(complex(rng.normal(), rng.normal()))
    f = TFPoly.from_arrays(lat, caps, np.array(rows), np.array(coeffs))
    return f.real_part() if real else f


def desk_perturbation(seed=1, size=1e-3):
    """Random real perturbation on the desk lattice with weighted norm ``size``."""
    lat = LatticeConfig(2, 2, ((0, 0), (1, 0)), 3)
    caps = Caps(6, 1, 3)
    rng = np.random.default_rng(seed)
    nA, nL = 2, lat.n_normal
    rows, co = [], []
    for _ in range(300):
        k = rng.integers(-3, 4, size=2)
        wt = rng.integers(0, 4)
        al = np.zeros(nA, int)
        be = np.zeros(2 * nL, int)
        if wt >= 2 and rng.random() < 0.4:
            al[rng.integers(nA)] = 1
            rest = wt - 2
        else:
            rest = wt
        for _ in range(rest):
            be[rng.integers(min(2 * nL, 16))] += 1
        rows.append(np.concatenate([k, al, be]))
        co.append((rng.normal() + 1j * rng.normal()) * np.exp(-abs(k).sum()))
    f = TFPoly.from_arrays(lat, caps, np.array(rows), np.array(co)).real_part()
    return lat, f.scale(size / vf_weighted_norm(f, RADII))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_lattice():
    return LatticeConfig(2, 2, ((0, 0), (1, 0)), 1)


HOMOMORPHISM_CAPS = Caps(12, 2, 6)


def closed_generator(lat, caps, rng, size=0.1):
    """Real generator whose Lie series never leaves ``caps``.

    Angle-only and zeta-linear terms lower the weight, so they add Fourier
    modes only finitely often; the weight-two part has ``k = 0`` and keeps
    both the weight and the modes.
    """
    nA, nL = lat.n_tangential, lat.n_normal
    zero_k = [0] * nA
    terms = []
    for a in range(nA):
        k = list(zero_k)
        k[a] = 1
        terms.append(((k, zero_k, ()), complex(rng.normal(), rng.normal())))
        alpha = list(zero_k)
        alpha[a] = 1
        terms.append(((zero_k, alpha, ()), rng.normal()))
    for _ in range(4):
        k = list(zero_k)
        k[rng.integers(nA)] = int(rng.choice([-1, 1]))
        terms.append(((k, zero_k, [(int(rng.integers(2 * nL)), 1)]), complex(rng.normal(), rng.normal())))
    for _ in range(6):
        i, j = rng.integers(2 * nL, size=2)
        beta = [(int(i), 2)] if i == j else [(int(i), 1), (int(j), 1)]
        terms.append(((zero_k, zero_k, beta), rng.normal()))
    s = TFPoly.from_terms(lat, caps, terms).real_part()
    return s.scale(size / vf_weighted_norm(s, RADII))


def homomorphism_defect(lat, rng, size=0.1):
    """``|T{f, g} - {Tf, Tg}|`` for one random pair, ``T`` the Lie transform of a closed generator."""
    from nlskam.algebra import poisson_bracket
    from nlskam.kamflow import lie_transform

    caps = HOMOMORPHISM_CAPS
    s = closed_generator(lat, caps, rng, size)
    f = random_poly(lat, caps, rng, n_terms=8, k_range=1, max_weight=3)
    g = random_poly(lat, caps, rng, n_terms=8, k_range=1, max_weight=3)

    def T(p):
        return lie_transform(p, s, tol=1e-17, n_max=80, radii=RADII)

    lhs = T(poisson_bracket(f, g))
    rhs = poisson_bracket(T(f), T(g))
    dropped = lhs.dropped + rhs.dropped
    return vf_weighted_norm(lhs - rhs, RADII), dropped


# acceptance lines collected by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
