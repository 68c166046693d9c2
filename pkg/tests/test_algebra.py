import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import RADII, random_poly
from nlskam.algebra import (
    Caps,
    DomainRadii,
    LatticeConfig,
    TFPoly,
    dumps,
    eval_vector_field,
    loads,
    low_jet,
    poisson_bracket,
    ptame_components,
    split_low_high,
    truncate_low_jet,
    vf_ptame_norm,
    vf_weighted_norm,
)
from nlskam.errors import ConfigurationError, ContractError

LAT = LatticeConfig(2, 2, ((0, 0), (1, 0)), 1)
CAPS = Caps(4, 2, 4)
BIG = Caps(16, 8, 14)
seeds = st.integers(0, 2**31 - 1)


def poly(seed, caps=CAPS, **kw):
    return random_poly(LAT, caps, np.random.default_rng(seed), **kw)


def diff(f, g):
    return (f - g).max_abs()


# -- configuration ----------------------------------------------------------


def test_lattice_config_partition():
    lat = LatticeConfig(2, 2, ((0, 0),), 2)
    assert lat.n_normal == 24
    assert (0, 0) not in lat.normal_sites
    assert len(set(lat.normal_sites)) == 24


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(d=2, p=1.0, tangential_sites=((0, 0),), box_radius=1),
        dict(d=2, p=2.0, tangential_sites=(), box_radius=1),
        dict(d=2, p=2.0, tangential_sites=((5, 0),), box_radius=1),
        dict(d=2, p=2.0, tangential_sites=((0, 0), (0, 0)), box_radius=1),
    ],
)
def test_lattice_config_rejects(kwargs):
    with pytest.raises(ConfigurationError):
        LatticeConfig(**kwargs)


def test_mismatched_lattices_rejected():
    other = LatticeConfig(2, 2, ((0, 0),), 1)
    with pytest.raises(ConfigurationError):
        TFPoly.action(LAT, CAPS, 0) + TFPoly.action(other, CAPS, 0)


# -- ring operations --------------------------------------------------------


def test_conjugate_pair_is_real_cosine():
    f = TFPoly.fourier(LAT, CAPS, (1, 0)) + TFPoly.fourier(LAT, CAPS, (-1, 0))
    assert f.reality_defect() == 0.0
    phi = np.array([0.3, -1.1])
    assert f(phi, np.zeros(2), np.zeros(2 * LAT.n_normal)) == pytest.approx(2 * np.cos(0.3))


def test_product_with_zero_is_empty():
    f = poly(1)
    assert (f * TFPoly.zero(LAT, CAPS)).nterms == 0


def test_product_truncates_to_caps():
    caps = Caps(4, 1, 1)
    xi = TFPoly.xi(LAT, caps, 0)
    prod = xi * xi
    assert prod.nterms == 0
    assert prod.dropped == pytest.approx(1.0)


def test_zero_coefficients_not_stored():
    f = TFPoly.action(LAT, CAPS, 0)
    assert (f - f).nterms == 0


@given(seeds)
def test_product_matches_pointwise(seed):
    f, g = poly(seed, BIG, n_terms=8, max_weight=3), poly(seed + 1, BIG, n_terms=8, max_weight=3)
    rng = np.random.default_rng(seed)
    phi, r, z = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2 * LAT.n_normal)
    assert (f * g)(phi, r, z) == pytest.approx(f(phi, r, z) * g(phi, r, z), rel=1e-10, abs=1e-10)


@given(seeds)
def test_operations_preserve_reality(seed):
    f, g = poly(seed), poly(seed + 7)
    assert f.reality_defect() < 1e-15
    scale = 1 + f.max_abs() * g.max_abs()
    assert poisson_bracket(f, g).reality_defect() <= 1e-14 * scale
    assert (f * g).reality_defect() <= 1e-14 * scale
    assert (f + g.scale(0.5)).reality_defect() <= 1e-15 * scale


# -- Poisson bracket ---------------------------------------------------------


def test_canonical_pair_angle_action():
    e = TFPoly.fourier(LAT, CAPS, (1, 0))
    r = TFPoly.action(LAT, CAPS, 0)
    assert diff(poisson_bracket(e, r), e.scale(1j)) == 0.0


def test_canonical_pair_xi_eta():
    b = 3
    out = poisson_bracket(TFPoly.xi(LAT, CAPS, b), TFPoly.eta(LAT, CAPS, b))
    assert diff(out, TFPoly.constant(LAT, CAPS, 1.0)) == 0.0


@given(seeds)
def test_bracket_antisymmetric(seed):
    f, g = poly(seed), poly(seed + 3)
    assert poisson_bracket(f, f).nterms == 0
    fg, gf = poisson_bracket(f, g), poisson_bracket(g, f)
    assert diff(fg, -gf) <= 1e-14 * (1 + np.abs(fg.coeffs).max(initial=0))


@given(seeds)
def test_bracket_is_bilinear(seed):
    f, g, h = poly(seed), poly(seed + 1), poly(seed + 2)
    left = poisson_bracket(f.scale(2.0) + h, g)
    right = poisson_bracket(f, g).scale(2.0) + poisson_bracket(h, g)
    assert diff(left, right) <= 1e-13 * (1 + left.max_abs())


@given(seeds)
def test_jacobi_identity_with_doubled_caps(seed):
    kw = dict(n_terms=10, k_range=2, max_weight=4)
    f, g, h = (poly(seed + i, BIG, **kw) for i in range(3))
    jac = (
        poisson_bracket(f, poisson_bracket(g, h))
        + poisson_bracket(g, poisson_bracket(h, f))
        + poisson_bracket(h, poisson_bracket(f, g))
    )
    assert jac.dropped == 0.0
    assert jac.max_abs() <= 1e-12


@given(seeds)
def test_bracket_is_derivation(seed):
    f, g, h = (poly(seed + i, BIG, n_terms=6, max_weight=3) for i in range(3))
    left = poisson_bracket(f * g, h)
    right = f * poisson_bracket(g, h) + g * poisson_bracket(f, h)
    assert diff(left, right) <= 1e-12 * (1 + left.max_abs())


# -- grading ----------------------------------------------------------------


def test_split_examples():
    r = TFPoly.action(LAT, CAPS, 0)
    low, high = split_low_high(r)
    assert diff(low, r) == 0 and high.nterms == 0
    rxi = r * TFPoly.xi(LAT, CAPS, 1)
    low, high = split_low_high(rxi)
    assert low.nterms == 0 and diff(high, rxi) == 0
    quad = TFPoly.xi(LAT, CAPS, 0) * TFPoly.eta(LAT, CAPS, 1)
    cubic = TFPoly.xi(LAT, CAPS, 0) * TFPoly.xi(LAT, CAPS, 1) * TFPoly.xi(LAT, CAPS, 2)
    low, high = split_low_high(quad + cubic)
    assert diff(low, quad) == 0 and diff(high, cubic) == 0


@given(seeds)
def test_split_is_exact_direct_sum(seed):
    f = poly(seed, n_terms=60)
    low, high = split_low_high(f)
    assert low.nterms + high.nterms == f.nterms
    assert np.all(low.weights() <= 2) and np.all(high.weights() >= 3)
    back = low + high
    assert np.array_equal(np.sort(back.coeffs.real), np.sort(f.coeffs.real))
    assert diff(back, f) == 0.0


# -- truncation -------------------------------------------------------------


def test_truncation_drops_high_mode():
    f = TFPoly.fourier(LAT, CAPS, (2, 1))
    assert truncate_low_jet(f, 2.0).nterms == 0
    assert truncate_low_jet(f, 3.0).nterms == 1


def test_truncation_identity_on_diagonal_quadratic():
    f = sum((TFPoly.xi(LAT, CAPS, b) * TFPoly.xi(LAT, CAPS, b) for b in range(LAT.n_normal)),
            TFPoly.zero(LAT, CAPS))
    f = f + TFPoly.fourier(LAT, CAPS, (1, 1))
    assert diff(truncate_low_jet(f, CAPS.k_max), f) < 1e-15


def test_truncation_removes_far_entry_from_both_parts():
    a, b = LAT.normal_index[(1, 1)], LAT.normal_index[(1, -1)]
    # |a - b| = |a + b| = 2: cutoff 1 removes the entry from both projected parts
    f = TFPoly.xi(LAT, CAPS, a) * TFPoly.xi(LAT, CAPS, b) + TFPoly.xi(LAT, CAPS, a) * TFPoly.eta(LAT, CAPS, b)
    assert truncate_low_jet(f, 1.0).nterms == 0
    assert diff(truncate_low_jet(f, 2.0), f) < 1e-15


def test_truncation_keeps_only_near_part():
    lat = LatticeConfig(1, 1, ((0,),), 3)
    caps = Caps(2, 1, 2)
    a, b = lat.normal_index[(1,)], lat.normal_index[(-3,)]
    f = TFPoly.xi(lat, caps, a) * TFPoly.xi(lat, caps, b) + TFPoly.xi(lat, caps, a) * TFPoly.eta(lat, caps, b)
    # |a - b| = 4 removes the projected part, |a + b| = 2 keeps the complement
    jet = low_jet(truncate_low_jet(f, 3.0)).z2[0]
    blk = jet[2 * a : 2 * a + 2, 2 * b : 2 * b + 2]
    assert np.abs(blk).max() > 0
    assert blk[0, 0] == pytest.approx(-blk[1, 1]) and blk[0, 1] == pytest.approx(blk[1, 0])


def test_truncation_rejects_weight_three():
    f = TFPoly.xi(LAT, CAPS, 0) * TFPoly.action(LAT, CAPS, 0)
    with pytest.raises(ContractError):
        truncate_low_jet(f, 2.0)


@given(seeds, st.floats(0.0, 4.0))
def test_truncation_monotone_in_norm(seed, cutoff):
    low, _ = split_low_high(poly(seed, n_terms=60))
    assert vf_weighted_norm(truncate_low_jet(low, cutoff), RADII) <= vf_weighted_norm(low, RADII) * (1 + 1e-12)


# -- norms ------------------------------------------------------------------


def test_norm_of_zero_and_action():
    assert vf_weighted_norm(TFPoly.zero(LAT, CAPS), RADII) == 0.0
    assert vf_weighted_norm(TFPoly.action(LAT, CAPS, 1, coeff=0.7), RADII) == pytest.approx(0.7)


def test_ptame_linear_single_site():
    b = LAT.normal_index[(1, 1)]
    f = TFPoly.xi(LAT, CAPS, b, coeff=0.3)
    comp = ptame_components(f, RADII)
    assert comp["zeta"] == pytest.approx(0.3 * np.sqrt(2) ** LAT.p)
    assert comp["r"] == 0 and comp["phi"] == 0


def test_ptame_identity_block():
    lat = LatticeConfig(2, 2, ((0, 0),), 1)
    block = [lat.normal_index[s] for s in ((1, 0), (0, 1), (-1, 0), (0, -1))]
    f = TFPoly.zero(lat, CAPS)
    for b in block:
        f = f + (TFPoly.xi(lat, CAPS, b) * TFPoly.xi(lat, CAPS, b) + TFPoly.eta(lat, CAPS, b)
                 * TFPoly.eta(lat, CAPS, b)).scale(0.5)
    assert ptame_components(f, RADII)["zeta"] == pytest.approx(RADII.sigma)


def _sampled_sup(f, radii, rng, n=1000):
    nA, nL = f.lattice.n_tangential, f.lattice.n_normal
    w = np.concatenate([f.lattice.site_weights(), f.lattice.site_weights()])
    dr = [f.d_r(a) for a in range(nA)]
    dp = [f.d_phi(a) for a in range(nA)]
    dz = [f.d_zeta(j) for j in range(2 * nL)]
    best = 0.0
    for _ in range(n):
        phi = rng.uniform(0, 2 * np.pi, nA) + 1j * rng.uniform(-radii.rho, radii.rho, nA)
        r = radii.mu * rng.uniform(0, 1, nA) * np.exp(2j * np.pi * rng.random(nA))
        z = rng.normal(size=2 * nL) + 1j * rng.normal(size=2 * nL)
        z *= radii.sigma / np.sqrt(np.sum(np.abs(z) ** 2 * w**2))
        gr = max(abs(g(phi, r, z)) for g in dr)
        gp = max(abs(g(phi, r, z)) for g in dp)
        gz = np.sqrt(sum(abs(g(phi, r, z)) ** 2 * w[j] ** 2 for j, g in enumerate(dz)))
        best = max(best, gr + gp / radii.mu + gz / radii.sigma)
    return best


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_weighted_norm_majorises_samples(seed):
    f = poly(seed, n_terms=25)
    sampled = _sampled_sup(f, RADII, np.random.default_rng(seed))
    assert vf_weighted_norm(f, RADII) >= sampled


@given(seeds)
def test_weighted_below_tame_for_low_degree(seed):
    f = poly(seed, Caps(4, 1, 2), n_terms=30, max_weight=2)
    assert vf_weighted_norm(f, RADII) <= vf_ptame_norm(f, RADII) * (1 + 1e-12)


@given(seeds)
def test_norm_monotone_in_coefficients(seed):
    f = poly(seed)
    assert vf_weighted_norm(f.scale(2.0), RADII) == pytest.approx(2 * vf_weighted_norm(f, RADII))
    part = f.select(np.arange(f.nterms) % 2 == 0)
    # dropping terms of a polynomial with one term per monomial never raises a majorant of moduli
    assert vf_weighted_norm(part.real_part(), RADII) <= 2 * vf_weighted_norm(f, RADII)


def test_bracket_norm_constant_is_finite():
    rng = np.random.default_rng(4)
    tau = RADII.rho / 200
    inner = DomainRadii(RADII.rho - tau, RADII.mu * 0.9, RADII.sigma - tau, RADII.gamma)
    ratios = []
    for i in range(100):
        f = random_poly(LAT, CAPS, rng, n_terms=8, max_weight=3)
        g = random_poly(LAT, CAPS, rng, n_terms=8, max_weight=2)
        bound = max(1 / tau, RADII.sigma / tau) * vf_weighted_norm(f, RADII) * vf_weighted_norm(g, RADII)
        ratios.append(vf_weighted_norm(poisson_bracket(f, g), inner) / bound)
    assert np.all(np.isfinite(ratios)) and max(ratios) < 1e3


# -- vector field -----------------------------------------------------------


def test_vector_field_linear_flow():
    omega = np.array([1.3, -0.4])
    f = TFPoly.action(LAT, CAPS, 0, omega[0]) + TFPoly.action(LAT, CAPS, 1, omega[1])
    vf = eval_vector_field(f, np.zeros(2), np.zeros(2), np.zeros(LAT.n_normal), np.zeros(LAT.n_normal))
    assert np.allclose(vf.phi_dot, omega) and np.allclose(vf.r_dot, 0)


def test_vector_field_harmonic_oscillator():
    b, Om = 2, 1.7
    f = (TFPoly.xi(LAT, CAPS, b) * TFPoly.xi(LAT, CAPS, b) + TFPoly.eta(LAT, CAPS, b) * TFPoly.eta(LAT, CAPS, b)).scale(
        Om / 2)
    xi = np.zeros(LAT.n_normal)
    eta = np.zeros(LAT.n_normal)
    xi[b], eta[b] = 0.4, -0.9
    vf = eval_vector_field(f, np.zeros(2), np.zeros(2), xi, eta)
    assert vf.xi_dot[b] == pytest.approx(Om * eta[b]) and vf.eta_dot[b] == pytest.approx(-Om * xi[b])


def test_vector_field_matches_central_differences():
    rng = np.random.default_rng(7)
    nL = LAT.n_normal
    f = random_poly(LAT, CAPS, rng, n_terms=30)
    h = 1e-6
    for _ in range(10):
        phi, r = rng.uniform(0, 2 * np.pi, 2), rng.uniform(-0.5, 0.5, 2)
        xi, eta = rng.normal(size=nL) * 0.5, rng.normal(size=nL) * 0.5

        def F(p, q, x, e):
            return float(np.real(f(p, q, np.concatenate([x, e]))))

        vf = eval_vector_field(f, phi, r, xi, eta)
        num_r = [(F(phi, r + h * e, xi, eta) - F(phi, r - h * e, xi, eta)) / (2 * h) for e in np.eye(2)]
        num_p = [(F(phi + h * e, r, xi, eta) - F(phi - h * e, r, xi, eta)) / (2 * h) for e in np.eye(2)]
        num_x = [(F(phi, r, xi + h * e, eta) - F(phi, r, xi - h * e, eta)) / (2 * h) for e in np.eye(nL)]
        num_e = [(F(phi, r, xi, eta + h * e) - F(phi, r, xi, eta - h * e)) / (2 * h) for e in np.eye(nL)]
        exact = np.concatenate([vf.phi_dot, -vf.r_dot, -vf.eta_dot, vf.xi_dot])
        numeric = np.concatenate([num_r, num_p, num_x, num_e])
        assert np.linalg.norm(exact - numeric) <= 1e-6 * np.linalg.norm(exact)


def test_vector_field_consistent_with_bracket():
    rng = np.random.default_rng(8)
    f = random_poly(LAT, CAPS, rng, n_terms=20)
    nL = LAT.n_normal
    phi, r = rng.normal(size=2), rng.normal(size=2)
    xi, eta = rng.normal(size=nL), rng.normal(size=nL)
    z = np.concatenate([xi, eta])
    vf = eval_vector_field(f, phi, r, xi, eta)
    for b in range(nL):
        assert np.real(poisson_bracket(TFPoly.xi(LAT, CAPS, b), f)(phi, r, z)) == pytest.approx(vf.xi_dot[b])
        assert np.real(poisson_bracket(TFPoly.eta(LAT, CAPS, b), f)(phi, r, z)) == pytest.approx(vf.eta_dot[b])
    for a in range(2):
        assert np.real(poisson_bracket(TFPoly.action(LAT, CAPS, a), f)(phi, r, z)) == pytest.approx(vf.r_dot[a])


# -- serialization ------------------------------------------------------------


@given(seeds)
def test_text_round_trip(seed):
    f = poly(seed)
    text = dumps(f)
    g = loads(text, LAT)
    assert g.caps == f.caps and diff(f, g) == 0.0
    assert dumps(g) == text


def test_text_format_lines():
    f = TFPoly.monomial(LAT, CAPS, k=(1, -1), alpha=(1, 0), beta=[(2, 1)], coeff=0.5 - 0.25j)
    line = dumps(f).splitlines()[1]
    assert line == "k=1,-1 alpha=1,0 beta=2:1 re=0.5 im=-0.25"


def test_loads_rejects_garbage():
    with pytest.raises(ConfigurationError):
        loads("# caps k_max=4 deg_r=2 deg_z=4\nk=1 alpha=\n", LAT)
