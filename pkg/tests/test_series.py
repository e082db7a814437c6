import math

import numpy as np
import pytest

from kirchhoff_kam import Budget, Domain, MonoKey, ParamJet, TFSeries, weighted_conv_norm

from helpers import (
    from_dict,
    max_coef_diff,
    naive_mul,
    naive_poisson,
    random_series,
    to_dict,
)

DOM = Domain(r=0.5, s=0.1, rho=0.25, a=1.0)


@pytest.fixture
def bud():
    return Budget(nu=1, b=2, tangential=(0, 1), n_max=8, k_cap=8, d_cap=6, dom=DOM)


def mono(bud, **kw):
    coef = kw.pop("coef", 1.0)
    return TFSeries.from_terms(bud, [(MonoKey.make(bud, **kw), coef)])


# ----------------------------------------------------------------- add / mul


def test_add_identity_and_inverse(bud):
    rng = np.random.default_rng(1)
    f = random_series(bud, rng)
    z = TFSeries.zero(bud)
    assert (f + z).series_norm() == pytest.approx(f.series_norm())
    g = f + f.scaled(-1.0)
    assert g.n_terms == 0
    assert g.tail == f.tail + f.tail


def test_add_disjoint_keys(bud):
    f = mono(bud, alpha={2: 1}) + mono(bud, beta={2: 1})
    assert f.n_terms == 2


def test_mul_unit_and_monomial(bud):
    one = mono(bud)
    g = random_series(bud, np.random.default_rng(2))
    prod = one.mul(g)
    assert max_coef_diff(bud, to_dict(prod), to_dict(g)) < 1e-15
    w2 = mono(bud, alpha={2: 1})
    sq = w2.mul(w2)
    key, jet = next(iter(sq.terms()))
    assert key.alpha == ((2, 2),) and jet.value == 1.0


def test_mul_matches_naive_and_product_rule(bud):
    rng = np.random.default_rng(3)
    for _ in range(25):
        f = random_series(bud, rng)
        g = random_series(bud, rng)
        got = to_dict(f.mul(g))
        want = naive_mul(bud, to_dict(f), to_dict(g))
        assert max_coef_diff(bud, got, want) < 1e-12


def test_norm_submultiplicative_100_random(bud):
    rng = np.random.default_rng(4)
    for _ in range(100):
        f = random_series(bud, rng, n_terms=4)
        g = random_series(bud, rng, n_terms=4)
        lhs = f.mul(g).series_norm(DOM)
        rhs = f.series_norm(DOM) * g.series_norm(DOM)
        assert lhs <= rhs * (1 + 1e-12)


# ------------------------------------------------------------------- bracket


def test_bracket_hand_example(bud):
    f = mono(bud, alpha={2: 1}).mul(mono(bud, beta={2: 1}))  # w2 wbar2
    g = mono(bud, alpha={2: 1}) + mono(bud, beta={2: 1})
    br = f.poisson(g)
    want = {
        ((0, 0, 0), (0, 0), (), ((2, 1),)): ParamJet.constant(1j, 3),
        ((0, 0, 0), (0, 0), ((2, 1),), ()): ParamJet.constant(-1j, 3),
    }
    assert max_coef_diff(bud, to_dict(br), want) < 1e-15


def test_bracket_antisymmetry(bud):
    # exact up to the tail bound plus float-association rounding
    rng = np.random.default_rng(5)
    for _ in range(20):
        f = random_series(bud, rng)
        eps = 1e-13 * f.series_norm() ** 2
        assert f.poisson(f).series_norm() <= 2 * f.tail + eps
        g = random_series(bud, rng)
        d = f.poisson(g) + g.poisson(f)
        eps = 1e-13 * f.series_norm() * g.series_norm()
        assert d.series_norm() <= d.tail + eps


def test_bracket_matches_naive_oracle(bud):
    rng = np.random.default_rng(6)
    for _ in range(25):
        f = random_series(bud, rng)
        g = random_series(bud, rng)
        got = to_dict(f.poisson(g))
        want = naive_poisson(bud, to_dict(f), to_dict(g))
        assert max_coef_diff(bud, got, want) < 1e-10


def test_jacobi_identity(bud):
    rng = np.random.default_rng(7)
    for _ in range(10):
        f = random_series(bud, rng, n_terms=4, max_deg=2)
        g = random_series(bud, rng, n_terms=4, max_deg=2)
        h = random_series(bud, rng, n_terms=4, max_deg=2)
        s = (
            f.poisson(g).poisson(h)
            + g.poisson(h).poisson(f)
            + h.poisson(f).poisson(g)
        )
        eps = 1e-12 * f.series_norm() * g.series_norm() * h.series_norm()
        assert s.series_norm() <= s.tail + eps


def test_bracket_bilinearity(bud):
    rng = np.random.default_rng(8)
    f = random_series(bud, rng)
    g = random_series(bud, rng)
    h = random_series(bud, rng)
    lhs = (f + g.scaled(2.5)).poisson(h)
    rhs = f.poisson(h) + g.poisson(h).scaled(2.5)
    assert (lhs - rhs).series_norm() <= lhs.tail + rhs.tail + 1e-10


# ----------------------------------------------------------------- gamma_K


def test_gamma_split_partition(bud):
    f = (
        mono(bud, k=(0, 0, 0))
        + mono(bud, k=(1, 0, 0))
        + mono(bud, k=(-1, 0, 0))
        + mono(bud, k=(5, 0, 0))
        + mono(bud, k=(-5, 0, 0))
    )
    low, high = f.gamma_split(2)
    assert sorted(k.k[0] for k, _ in low.terms()) == [-1, 0, 1]
    assert sorted(k.k[0] for k, _ in high.terms()) == [-5, 5]
    back = low + high
    assert max_coef_diff(bud, to_dict(back), to_dict(f)) == 0.0
    assert back.tail == f.tail


def test_gamma_split_constant(bud):
    f = mono(bud, coef=3.0)
    low, high = f.gamma_split(4)
    assert low.n_terms == 1 and high.n_terms == 0


def test_gamma_uses_blockwise_max_norm(bud):
    # k = (1 | 1, 1): block norms are 1 and 2, so |k| = 2
    f = mono(bud, k=(1, 1, 1))
    low, high = f.gamma_split(1)
    assert low.n_terms == 0 and high.n_terms == 1
    low, high = f.gamma_split(2)
    assert low.n_terms == 1


# -------------------------------------------------------------------- norms


def test_norm_hand_values(bud):
    assert TFSeries.zero(bud).series_norm(DOM) == 0.0
    c = mono(bud, k=(1, 0, 0), coef=2.0)
    assert c.series_norm(DOM) == pytest.approx(2.0 * math.exp(0.5))
    m = mono(bud, alpha={2: 1})
    assert m.series_norm(DOM) == pytest.approx(0.1 * 2.0 ** -1 * math.exp(-0.5))


def test_norm_includes_gradient(bud):
    f = TFSeries.from_terms(bud, [(MonoKey.make(bud), ParamJet(1.0, [1.0, 0, 0]))])
    assert f.series_norm(DOM) == pytest.approx(2.0)


def test_vecfield_hand_values(bud):
    assert TFSeries.zero(bud).vecfield_norm(DOM) == 0.0
    i1 = mono(bud, l=(1, 0))
    assert i1.vecfield_norm(DOM) == pytest.approx(1.0)


def test_cauchy_inequality_c1(bud):
    # |d_theta f| at strip r - rho_step is <= (1/rho_step) |f| at r, c = 1
    rng = np.random.default_rng(9)
    for _ in range(100):
        f = random_series(bud, rng)
        for step in (0.05, 0.1, 0.25):
            shrunk = Domain(DOM.r - step, DOM.s, DOM.rho, DOM.a)
            lhs = sum(
                f.d_theta(j).series_norm(shrunk) for j in range(bud.tb)
            ) - (bud.tb) * f.tail
            assert lhs <= (bud.tb / step) * f.series_norm(DOM) * (1 + 1e-12)


def test_cauchy_single_angle(bud):
    rng = np.random.default_rng(10)
    for _ in range(100):
        f = random_series(bud, rng)
        step = 0.1
        shrunk = Domain(DOM.r - step, DOM.s, DOM.rho, DOM.a)
        lhs = f.d_theta(0).series_norm(shrunk) - f.tail
        assert lhs <= (1.0 / step) * f.series_norm(DOM) * (1 + 1e-12)


def test_decay_transport_c4(bud):
    # single decayed site factor f_n against random g:
    # |{f_n, g}| at (r - step, s/2) <= 4 step^-1 s^-2 |f_n| |g|
    rng = np.random.default_rng(11)
    step = 0.1
    half = Domain(DOM.r - step, DOM.s / 2, DOM.rho, DOM.a)
    for _ in range(100):
        n = int(rng.choice([m for m in bud.sites if abs(m) <= 4]))
        fn = mono(bud, k=(1, 0, 0), alpha={n: 1}, coef=math.exp(-abs(n) * DOM.rho))
        g = random_series(bud, rng)
        lhs = fn.poisson(g).series_norm(half)
        rhs = 4.0 / (step * DOM.s**2) * fn.series_norm(DOM) * g.series_norm(DOM)
        assert lhs <= rhs * (1 + 1e-12) + 1e-14


def test_conv_norm_examples_and_bound():
    n, r = 1.0, 0.25
    got = weighted_conv_norm({2: 1.0}, {3: 1.0}, n, r)
    assert got[0] == pytest.approx(5.0 * math.exp(5 * r))
    assert weighted_conv_norm({}, {}, 1.0, 0.25) == (0.0, 0.0, 0.0)
    rng = np.random.default_rng(12)
    for _ in range(100):
        a = 1.0 + rng.random()
        p = {int(n): rng.normal() for n in rng.choice(range(1, 7), size=3, replace=False)}
        q = {int(n): rng.normal() for n in rng.choice(range(1, 7), size=3, replace=False)}
        pq, pn, qn = weighted_conv_norm(p, q, a, 0.25)
        assert pq <= 2.0**a * pn * qn * (1 + 1e-12)


# --------------------------------------------------------- tails and budget


def test_tail_monotone_over_lossy_ops(bud):
    small = Budget(nu=1, b=2, tangential=(0, 1), n_max=8, k_cap=2, d_cap=2, dom=DOM)
    f = mono(small, k=(2, 0, 0), alpha={2: 1})
    g = mono(small, k=(1, 0, 0), alpha={3: 1})
    h = f.mul(g)  # k = 3 > cap and degree fine -> dropped to tail
    assert h.n_terms == 0
    assert h.tail > 0
    h2 = h + h
    assert h2.tail == 2 * h.tail


def test_compress_moves_weight_to_tail(bud):
    f = mono(bud, coef=1.0) + mono(bud, k=(1, 0, 0), coef=1e-30)
    g = f.compress(1e-20)
    assert g.n_terms == 1
    assert g.tail >= 1e-30
    assert g.series_norm(DOM) >= f.series_norm(DOM) - 1e-25


def test_budget_mismatch_raises(bud):
    other = Budget(nu=1, b=2, tangential=(0, 1), n_max=4, k_cap=8, d_cap=6, dom=DOM)
    f = mono(bud)
    g = mono(other)
    with pytest.raises(Exception):
        f + g


# ------------------------------------------------------------------ reality


def test_reality_preserved_by_algebra(bud):
    rng = np.random.default_rng(13)
    f = random_series(bud, rng, real=True)
    g = random_series(bud, rng, real=True)
    assert f.reality_defect() < 1e-12
    assert (f + g).reality_defect() < 1e-12
    assert f.mul(g).reality_defect() < 1e-12
    # with the symplectic pairing i dw ^ dwbar baked into the bracket,
    # the bracket of two real series is itself real
    br = f.poisson(g)
    assert br.reality_defect() < 1e-10


# ------------------------------------------------------------ serialization


def test_serialization_roundtrip_bit_exact(bud):
    rng = np.random.default_rng(14)
    f = random_series(bud, rng, n_terms=10)
    f = TFSeries(f.budget, f.keys, f.coefs, tail=1.2345678912345678e-17)
    text = f.to_text()
    g = TFSeries.from_text(text)
    assert g.to_text() == text
    assert g.tail == f.tail
    assert max_coef_diff(bud, to_dict(f), to_dict(g)) == 0.0


def test_monokey_rejects_tangential_exponent(bud):
    with pytest.raises(ValueError):
        MonoKey.make(bud, alpha={1: 1})
    with pytest.raises(ValueError):
        MonoKey.make(bud, alpha={0: 2})


def test_eval_value(bud):
    f = mono(bud, k=(1, 0, 0), coef=2.0) + mono(bud, l=(1, 0), coef=1.0)
    theta = np.array([0.3, 0.0, 0.0])
    val = f.eval_value(theta, I=[0.5, 0.0])
    assert val == pytest.approx(2.0 * np.exp(1j * 0.3) + 0.5)
