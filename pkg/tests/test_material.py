import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evomix.algebra import axial_to_skew
from evomix.material import (
    BlockDiagonal,
    InadmissibleMaterial,
    MaterialLaw,
    bianisotropic_coupling_norm,
    check_evo_positivity,
    isotropic_stiffness,
    make_bianisotropic,
    make_chiral,
    make_elastic,
    make_isotropic_em,
    make_omega,
    smallest_admissible_nu,
)


def dense_eta(law, nu):
    m = nu * law.M0.todense() + 0.5 * (law.M1.todense() + law.M1.todense().T)
    return np.linalg.eigvalsh(m)[0]


def random_spd(rng, n, k, shift=0.1):
    a = rng.normal(size=(n, k, k))
    return a @ np.swapaxes(a, 1, 2) + shift * np.eye(k)


def test_vacuum_identity_blocks():
    law = make_isotropic_em(1.0, 1.0)
    np.testing.assert_array_equal(law.M0.todense(), np.eye(6))
    np.testing.assert_array_equal(law.M1.todense(), np.zeros((6, 6)))
    rep = check_evo_positivity(law, 1.0)
    assert rep.eta == pytest.approx(1.0, abs=1e-15) and rep.admissible


@pytest.mark.parametrize("nu", [0.1, 0.5, 1.0, 3.0, 40.0])
def test_eddy_current(nu):
    law = make_isotropic_em(0.0, 1.0, 1.0)
    rep = check_evo_positivity(law, nu)
    assert rep.admissible
    assert rep.eta == pytest.approx(min(1.0, nu), rel=1e-14)


def test_negative_conductivity_inadmissible():
    rep = check_evo_positivity(make_isotropic_em(1.0, 1.0, -2.0), 1.0)
    assert not rep.admissible
    assert rep.eta == pytest.approx(-1.0, rel=1e-14)
    # the witness realises the eigenvalue
    law = make_isotropic_em(1.0, 1.0, -2.0)
    m = law.M0.todense() + 0.5 * (law.M1.todense() + law.M1.todense().T)
    w = rep.witness
    assert w @ m @ w == pytest.approx(-1.0, rel=1e-13)


@pytest.mark.parametrize("bad", [dict(mu=0.0), dict(mu=-1.0), dict(epsilon=-1.0)])
def test_em_rejects_bad_coefficients(bad):
    args = dict(epsilon=1.0, mu=1.0) | bad
    with pytest.raises(InadmissibleMaterial):
        make_isotropic_em(**args)


def test_em_rejects_nonsymmetric_tensor():
    eps = np.eye(3)
    eps[0, 1] = 0.5
    with pytest.raises(InadmissibleMaterial):
        make_isotropic_em(eps, 1.0)


def test_per_cell_coefficients():
    law = make_isotropic_em(np.array([1.0, 2.0, 0.5]), 1.0, np.array([0.0, 1.0, 0.0]))
    assert law.n_blocks == 3
    assert check_evo_positivity(law, 1.0).eta == pytest.approx(0.5)
    with pytest.raises(ValueError):
        make_isotropic_em(np.ones(3), np.ones(2))


def test_bianisotropic_inside_bound():
    law = make_bianisotropic(1.0, 1.0, 0.5)
    m0 = law.M0.todense()
    np.testing.assert_array_equal(m0[:3, 3:], 0.5 * np.eye(3))
    np.testing.assert_array_equal(m0[3:, :3], 0.5 * np.eye(3))
    assert check_evo_positivity(law, 1.0).eta == pytest.approx(0.5, rel=1e-14)


def test_bianisotropic_beyond_bound():
    with pytest.raises(InadmissibleMaterial):
        make_bianisotropic(1.0, 1.0, 1.5)


def test_bianisotropic_at_bound_is_rank_degenerate():
    law = make_bianisotropic(1.0, 1.0, 1.0)
    assert abs(np.linalg.eigvalsh(law.M0.todense())[0]) <= 1e-12


def test_bianisotropic_bound_uses_scaled_norm():
    # eps = 4, mu = 1: speed of light 1/2, so |kappa| <= 2 is allowed
    assert bianisotropic_coupling_norm(4.0, 1.0, 2.0)[0] == pytest.approx(1.0, rel=1e-14)
    make_bianisotropic(4.0, 1.0, 1.9)
    with pytest.raises(InadmissibleMaterial):
        make_bianisotropic(4.0, 1.0, 2.1)


def test_bianisotropic_zero_kappa_reduces_to_isotropic():
    a = make_bianisotropic(2.0, 3.0, 0.0, 0.5)
    b = make_isotropic_em(2.0, 3.0, 0.5)
    np.testing.assert_array_equal(a.M0.todense(), b.M0.todense())
    np.testing.assert_array_equal(a.M1.todense(), b.M1.todense())


def test_bianisotropic_with_singular_epsilon():
    make_bianisotropic(0.0, 1.0, 0.0, 1.0)
    with pytest.raises(InadmissibleMaterial):
        make_bianisotropic(0.0, 1.0, 0.1, 1.0)


def test_chiral_is_skew_and_leaves_eta_unchanged():
    rng = np.random.default_rng(0)
    chi = rng.normal(size=(3, 3))
    chi = chi + chi.T
    frag = make_chiral(chi)
    m1 = frag.M1.todense()
    np.testing.assert_array_equal(m1 + m1.T, np.zeros((6, 6)))
    base = make_isotropic_em(1.0, 1.0)
    for nu in (0.5, 1.0, 2.0):
        assert check_evo_positivity(base + frag, nu).eta == check_evo_positivity(base, nu).eta
    assert check_evo_positivity(base + make_chiral(1.0), 2.0).eta == pytest.approx(2.0)


def test_chiral_rejects_nonsymmetric():
    with pytest.raises(InadmissibleMaterial):
        make_chiral(axial_to_skew(np.array([0.0, 0.0, 1.0])))


def test_omega_medium_eigen_oracle():
    chi = axial_to_skew(np.array([0.0, 1.0, 0.0]))
    law = make_isotropic_em(1.0, 1.0) + make_omega(chi)
    m1 = law.M1.todense()
    # chi^T = -chi makes M1 skew, so sym(M1) vanishes
    sym = 0.5 * (m1 + m1.T)
    expected = np.zeros((6, 6))
    np.testing.assert_array_equal(sym, expected)
    for nu in (0.25, 1.0):
        assert check_evo_positivity(law, nu).eta == pytest.approx(dense_eta(law, nu), abs=1e-14)


def test_omega_zero_and_scalar():
    base = make_isotropic_em(1.0, 2.0)
    law = base + make_omega(np.zeros((3, 3)))
    np.testing.assert_array_equal(law.M1.todense(), base.M1.todense())
    # 1x1 blocks: the only skew scalar is zero
    make_omega(np.zeros((1, 1)))
    with pytest.raises(InadmissibleMaterial):
        make_omega(np.ones((1, 1)))
    with pytest.raises(InadmissibleMaterial):
        make_omega(np.eye(3))


def test_elastic_identity():
    law = make_elastic(1.0, np.eye(6))
    np.testing.assert_allclose(law.M0.todense(), np.eye(9), atol=0)
    assert check_evo_positivity(law, 1.0).eta == pytest.approx(1.0)


def test_elastic_compliance_closed_form():
    lam, mu = 1.0, 1.0
    law = make_elastic(1.0, isotropic_stiffness(lam, mu))
    comp = law.M0.todense()[3:, 3:]
    # C^-1 T = T / (2 mu) - lam tr(T) I / (2 mu (3 lam + 2 mu))
    expected = np.eye(6) / (2 * mu)
    expected[:3, :3] -= lam / (2 * mu * (3 * lam + 2 * mu))
    np.testing.assert_allclose(comp, expected, rtol=0, atol=1e-13)


def test_elastic_rejects_singular_stiffness():
    c = np.eye(6)
    c[5, 5] = 0.0
    with pytest.raises(InadmissibleMaterial):
        make_elastic(1.0, c)
    with pytest.raises(InadmissibleMaterial):
        make_elastic(0.0, np.eye(6))
    with pytest.raises(ValueError):
        make_elastic(1.0, np.eye(5))


def test_nonsymmetric_m0_rejected_by_check():
    m0 = np.eye(2)
    m0[0, 1] = 0.1
    law = MaterialLaw(BlockDiagonal.uniform(m0), BlockDiagonal.uniform(np.zeros((2, 2))))
    with pytest.raises(InadmissibleMaterial):
        check_evo_positivity(law, 1.0)
    with pytest.raises(ValueError):
        check_evo_positivity(make_isotropic_em(1, 1), 0.0)


def test_random_2x2_blocks_match_dense_oracle():
    rng = np.random.default_rng(1)
    m0 = random_spd(rng, 50, 2)
    m1 = rng.normal(size=(50, 2, 2))
    law = MaterialLaw(BlockDiagonal.uniform(m0), BlockDiagonal.uniform(m1))
    for nu in (0.3, 1.0, 5.0):
        assert abs(check_evo_positivity(law, nu).eta - dense_eta(law, nu)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3, 6, 9]))
def test_dense_oracle_up_to_200_unknowns(seed, k):
    rng = np.random.default_rng(seed)
    nb = 200 // k
    law = MaterialLaw(BlockDiagonal.uniform(random_spd(rng, nb, k)),
                      BlockDiagonal.uniform(rng.normal(size=(nb, k, k))))
    nu = rng.uniform(0.1, 10.0)
    eta = check_evo_positivity(law, nu).eta
    assert abs(eta - dense_eta(law, nu)) <= 1e-12 * max(1.0, abs(eta))


@pytest.mark.parametrize("law", [
    make_isotropic_em(1.0, 1.0, -0.7),
    make_isotropic_em(0.0, 2.0, 0.3),
    make_bianisotropic(1.0, 2.0, 0.9, 0.1) + make_chiral(0.4),
    make_elastic(2.0, isotropic_stiffness(3.0, 0.5)),
])
def test_eta_monotone_in_nu(law):
    nus = np.geomspace(1e-3, 1e3, 40)
    etas = [check_evo_positivity(law, nu).eta for nu in nus]
    assert np.all(np.diff(etas) >= -1e-14 * np.maximum(np.abs(etas[1:]), 1.0))
    assert law.M0.asymmetry() <= 1e-14


def test_smallest_admissible_nu_scan():
    # eta(nu) = nu - 5 on the E block: first power of two above 5 is 8
    law = make_isotropic_em(1.0, 1.0, -5.0)
    rep = smallest_admissible_nu(law)
    assert rep.nu_used == 8.0 and rep.admissible
    assert smallest_admissible_nu(make_isotropic_em(0.0, 1.0, -1.0)) is None


def test_block_diagonal_structure_and_sum():
    a = BlockDiagonal.uniform(np.eye(2)[None].repeat(3, 0))
    b = BlockDiagonal.uniform(np.ones((3, 2, 2)))
    np.testing.assert_array_equal((a + b).todense(), a.todense() + b.todense())
    s = BlockDiagonal.direct_sum(a, BlockDiagonal.uniform(np.full((1, 3, 3), 2.0)))
    assert s.size == 9
    np.testing.assert_array_equal(s.todense()[6:, 6:], np.full((3, 3), 2.0))
    with pytest.raises(ValueError):
        a + s
