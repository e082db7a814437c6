"""Structural checks on the perturbation: exponent-class partition,
uniformity of the quasi-linear frequency shifts, and the weighted norm
of the angle-dependent part of the normal frequencies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .jets import jet_abs1
from .series import Budget, Domain, TFSeries

__all__ = [
    "classify_series",
    "classify_structure",
    "StructureReport",
    "toeplitz_lipschitz",
    "ToeplitzReport",
    "shift_norm",
    "second_w_derivative_sum",
    "hermiticity_defect",
]


def classify_series(P: TFSeries, ek: int):
    """Row masks (paired_high, single_high_forced, low_only, violation).

    paired: some exponent above the boundary, all of them sitewise even;
    forced: exactly one w-factor in total, sitting above the boundary,
    with no action dependence; low_only: nothing above the boundary.
    """
    bud = P.budget
    tb, b, S = bud.tb, bud.b, bud.n_sites
    ab = (P.keys[:, tb + b : tb + b + S] + P.keys[:, tb + b + S :]).astype(np.int64)
    l_tot = P.keys[:, tb : tb + b].astype(np.int64).sum(axis=1)
    high = np.abs(bud.sites) > ek
    ab_high = ab[:, high]
    high_sum = ab_high.sum(axis=1)
    high_even = (ab_high % 2 == 0).all(axis=1)
    total_w = ab.sum(axis=1)

    cls1 = (high_sum > 0) & high_even
    cls2 = (total_w == 1) & (high_sum == 1) & (l_tot == 0)
    cls3 = high_sum == 0
    viol = ~(cls1 | cls2 | cls3)
    # forced class takes precedence over paired on its (disjoint) pattern
    return cls1 & ~cls2, cls2, cls3, viol


@dataclass
class StructureReport:
    n_terms: int
    counts: dict
    violations: int
    violation_examples: list
    forced_fit_rate: float
    forced_fit_points: int
    forced_const: float
    required_rate: float
    ok: bool


def classify_structure(
    P1: TFSeries,
    P2: TFSeries,
    P3: TFSeries,
    ek: int,
    rho_bar: float,
    dom: Domain,
    eps_scale: float,
) -> StructureReport:
    P = P1 + P2 + P3
    c1, c2, c3, viol = classify_series(P, ek)
    examples = []
    if viol.any():
        from .series import MonoKey

        for i in np.nonzero(viol)[0][:5]:
            examples.append(MonoKey.from_row(P.budget, P.keys[i]))

    rate, npts, const = _forced_decay_fit(P, c2, ek, dom, eps_scale)
    ok = (not viol.any()) and (npts < 3 or rate >= rho_bar - 0.05)
    return StructureReport(
        n_terms=P.n_terms,
        counts={
            "paired": int(c1.sum()),
            "forced": int(c2.sum()),
            "low_only": int(c3.sum()),
        },
        violations=int(viol.sum()),
        violation_examples=examples,
        forced_fit_rate=rate,
        forced_fit_points=npts,
        forced_const=const,
        required_rate=rho_bar - 0.05,
        ok=ok,
    )


def _forced_decay_fit(P: TFSeries, mask, ek: int, dom: Domain, eps_scale: float):
    """ln coefficient norm vs |n| on the single-high-factor class."""
    bud = P.budget
    if not mask.any():
        return math.inf, 0, 0.0
    sub = TFSeries(bud, P.keys[mask], P.coefs[mask], 0.0)
    gk, norms = sub.coeff_norms(dom.r)
    tb, b, S = bud.tb, bud.b, bud.n_sites
    per_n: dict = {}
    for i in range(gk.shape[0]):
        ab = gk[i, b : b + S] + gk[i, b + S :]
        site = int(bud.sites[np.nonzero(ab)[0][0]])
        per_n[abs(site)] = per_n.get(abs(site), 0.0) + float(norms[i])
    ns = sorted(n for n, v in per_n.items() if v > 1e-300)
    if len(ns) < 2:
        return math.inf, len(ns), 0.0
    xs = np.array(ns, dtype=float)
    ys = np.log([per_n[n] for n in ns])
    slope, intercept = np.polyfit(xs, ys, 1)
    rate = -float(slope)
    const = float(np.exp(intercept) / max(eps_scale, 1e-300))
    return rate, len(ns), const


# ----------------------------------------------------------- quasi-linear shifts


def second_w_derivative_sum(P: TFSeries, n: int) -> TFSeries:
    """(1/|n|) (d^2 P / dw_n^2 + d^2 P / dwbar_n^2)."""
    bud = P.budget
    acc = None
    for bar in (False, True):
        col = bud.col_beta(n) if bar else bud.col_alpha(n)
        mask = P.keys[:, col] >= 2
        if not mask.any():
            continue
        keys = P.keys[mask].copy()
        e = keys[:, col].astype(np.float64)
        coefs = P.coefs[mask] * (e * (e - 1.0))[:, None]
        keys[:, col] -= 2
        part = TFSeries(bud, keys, coefs, 0.0)
        acc = part if acc is None else acc + part
    if acc is None:
        return TFSeries.zero(bud)
    from .series import _canonical

    keys, coefs = _canonical(acc.keys, acc.coefs / float(abs(n)), acc.coefs.shape[1])
    return TFSeries(bud, keys, coefs, 0.0)


@dataclass
class ToeplitzReport:
    limit_norm: float
    limit_site: int
    deviations: list  # (n, deviation, |n| * deviation)
    max_scaled_deviation: float
    eps_scale: float
    ok: bool


def toeplitz_lipschitz(P: TFSeries, dom: Domain, eps_scale: float, n_half=None) -> ToeplitzReport:
    """Uniform-in-n control of the pairwise second derivatives.

    The large-n limit is estimated at the outermost stored mode; the
    deviation bound |n| ||L_n - L_inf|| <= eps is checked on |n| up to
    half the mode cut so the estimate error stays second order.
    """
    bud = P.budget
    n_star = int(bud.sites[np.argmax(np.abs(bud.sites))])
    L_inf = second_w_derivative_sum(P, n_star)
    limit_norm = L_inf.series_norm(dom)
    n_half = n_half if n_half is not None else bud.n_max // 2
    devs = []
    worst = 0.0
    for n in bud.sites:
        n = int(n)
        if abs(n) > n_half:
            continue
        L_n = second_w_derivative_sum(P, n)
        dev = (L_n - L_inf).series_norm(dom)
        devs.append((n, dev, abs(n) * dev))
        worst = max(worst, abs(n) * dev)
    ok = limit_norm <= eps_scale * (1 + 1e-9) and worst <= eps_scale * (1 + 1e-9)
    return ToeplitzReport(
        limit_norm=limit_norm,
        limit_site=n_star,
        deviations=devs,
        max_scaled_deviation=worst,
        eps_scale=eps_scale,
        ok=ok,
    )


# ------------------------------------------------------------------- A7 norm


def shift_norm(f_theta: TFSeries, r: float, tau: float) -> float:
    """sum_k |f_k|_C1 |k|^{2 tau + 2} e^{|k| r} over the zero-mean part.

    The per-mode frequency shift is |n| times this quantity, so the bound
    delta0 (gamma0 - gamma) |n| reduces to this norm of f alone.
    """
    if f_theta.n_terms == 0:
        return 0.0
    kn = f_theta._knorm().astype(np.float64)
    w = jet_abs1(f_theta.coefs)
    mask = kn > 0
    return float(np.sum(w[mask] * kn[mask] ** (2 * tau + 2) * np.exp(kn[mask] * r)))


def hermiticity_defect(blocks: dict) -> float:
    worst = 0.0
    for n_abs, (sites, mat) in blocks.items():
        m = mat[:, :, 0]
        worst = max(worst, float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0)
    return worst
