"""Naive dict-based series operations used as independent oracles.

Deliberately written term-by-term from the definitions, sharing no code
path with the columnar engine it checks.
"""

from __future__ import annotations

import numpy as np

from kirchhoff_kam import Budget, MonoKey, ParamJet, TFSeries


def to_dict(f: TFSeries) -> dict:
    out = {}
    for key, jet in f.terms():
        out[(key.k, key.l, key.alpha, key.beta)] = jet
    return out


def from_dict(budget: Budget, d: dict, tail=0.0) -> TFSeries:
    terms = [
        (MonoKey(k, l, a, b), jet) for (k, l, a, b), jet in d.items()
    ]
    return TFSeries.from_terms(budget, terms, tail=tail)


def _acc(d, key, jet):
    if key in d:
        d[key] = d[key] + jet
    else:
        d[key] = jet


def _sparse_add(m: tuple, n: int, delta: int) -> tuple:
    dd = dict(m)
    dd[n] = dd.get(n, 0) + delta
    return tuple(sorted((a, b) for a, b in dd.items() if b))


def naive_mul(budget: Budget, f: dict, g: dict) -> dict:
    out = {}
    for (k1, l1, a1, b1), c1 in f.items():
        for (k2, l2, a2, b2), c2 in g.items():
            k = tuple(x + y for x, y in zip(k1, k2))
            l = tuple(x + y for x, y in zip(l1, l2))
            a = dict(a1)
            for n, e in a2:
                a[n] = a.get(n, 0) + e
            bb = dict(b1)
            for n, e in b2:
                bb[n] = bb.get(n, 0) + e
            key = (
                k,
                l,
                tuple(sorted(a.items())),
                tuple(sorted(bb.items())),
            )
            _acc(out, key, c1 * c2)
    return out


def _d_I(term, j):
    (k, l, a, b), c = term
    if l[j] == 0:
        return None
    l2 = tuple(x - (1 if i == j else 0) for i, x in enumerate(l))
    return ((k, l2, a, b), c * float(l[j]))


def _d_theta(term, j):
    (k, l, a, b), c = term
    if k[j] == 0:
        return None
    return ((k, l, a, b), c * complex(0, k[j]))


def _d_w(term, n, bar):
    (k, l, a, b), c = term
    m = dict(b if bar else a)
    if m.get(n, 0) == 0:
        return None
    e = m[n]
    m[n] -= 1
    m2 = tuple(sorted((x, y) for x, y in m.items() if y))
    if bar:
        return ((k, l, a, m2), c * float(e))
    return ((k, l, m2, b), c * float(e))


def naive_poisson(budget: Budget, f: dict, g: dict) -> dict:
    """Bracket straight from the definition, one term pair at a time."""
    out = {}
    sites = [int(n) for n in budget.sites]
    for tf in f.items():
        for tg in g.items():
            for j in range(budget.b):
                df = _d_I(tf, j)
                dg = _d_theta(tg, budget.nu + j)
                if df and dg:
                    for key, jet in naive_mul(budget, dict([df]), dict([dg])).items():
                        _acc(out, key, jet)
                df = _d_theta(tf, budget.nu + j)
                dg = _d_I(tg, j)
                if df and dg:
                    for key, jet in naive_mul(budget, dict([df]), dict([dg])).items():
                        _acc(out, key, jet * (-1.0))
            touched = {n for n, _ in tf[0][2] + tf[0][3] + tg[0][2] + tg[0][3]}
            for n in touched:
                if n not in sites:
                    continue
                df = _d_w(tf, n, bar=False)
                dg = _d_w(tg, n, bar=True)
                if df and dg:
                    for key, jet in naive_mul(budget, dict([df]), dict([dg])).items():
                        _acc(out, key, jet * 1j)
                df = _d_w(tf, n, bar=True)
                dg = _d_w(tg, n, bar=False)
                if df and dg:
                    for key, jet in naive_mul(budget, dict([df]), dict([dg])).items():
                        _acc(out, key, jet * (-1j))
    return {k: v for k, v in out.items() if abs(v.value) + np.abs(v.grad).sum() != 0}


def random_series(budget: Budget, rng, n_terms=6, max_k=2, max_deg=2, real=False):
    """Small random series safely inside half the budget."""
    terms = []
    sites = [int(n) for n in budget.sites if abs(n) <= min(4, budget.n_max)]
    for _ in range(n_terms):
        k = tuple(int(rng.integers(-max_k, max_k + 1)) for _ in range(budget.tb))
        deg_budget = max_deg
        l = []
        for _ in range(budget.b):
            e = int(rng.integers(0, 2)) if deg_budget >= 2 else 0
            deg_budget -= 2 * e
            l.append(e)
        alpha, beta = {}, {}
        while deg_budget > 0 and rng.random() < 0.7:
            n = int(rng.choice(sites))
            if rng.random() < 0.5:
                alpha[n] = alpha.get(n, 0) + 1
            else:
                beta[n] = beta.get(n, 0) + 1
            deg_budget -= 1
        val = complex(rng.normal(), rng.normal())
        grad = rng.normal(size=budget.dim_sigma) + 1j * rng.normal(size=budget.dim_sigma)
        key = MonoKey.make(budget, k, tuple(l), alpha, beta)
        terms.append((key, ParamJet(val, grad)))
    f = TFSeries.from_terms(budget, terms)
    if real:
        f = f + f.conjugate_flip()
        f = f.scaled(0.5)
    return f


def max_coef_diff(budget: Budget, d1: dict, d2: dict) -> float:
    keys = set(d1) | set(d2)
    worst = 0.0
    z = ParamJet.constant(0.0, budget.dim_sigma)
    for k in keys:
        a = d1.get(k, z)
        b = d2.get(k, z)
        worst = max(worst, (a - b).abs1())
    return worst
