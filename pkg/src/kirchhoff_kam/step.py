"""One normal-form step: truncate, solve, push the Hamiltonian through
the time-1 flow of the generator, fold the solved means into the normal
form, and re-verify the structural properties on the new perturbation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .jets import ParamJet
from .series import Budget, Domain, MonoKey, TFSeries
from .model import ModelConfig, NormalForm, SigmaPoint
from .homological import (
    DivisorViolation,
    NeumannDivergence,
    RParts,
    Thresholds,
    block_diagonalize,
    poisson_nf,
    solve,
    truncate_R,
)
from .structure import classify_series, classify_structure, toeplitz_lipschitz, shift_norm

__all__ = [
    "StepParams",
    "StepState",
    "StepReport",
    "StepRejected",
    "block_diagonalize",
    "lie_transform",
    "run_step",
    "verify_A5",
    "verify_A6",
]


class StepRejected(RuntimeError):
    def __init__(self, reason: str, report=None):
        self.reason = reason
        self.report = report
        super().__init__(reason)


@dataclass
class StepParams:
    nu_index: int
    r: float
    s: float
    rho: float
    r_next: float
    s_next: float
    rho_next: float
    gamma: float
    gamma0: float
    tau: float
    delta0: float
    K: int
    EK: int
    EK_minus: int
    eta: float
    eps_sched: float
    eps_sched_next: float
    drift_bound: float
    a: float = 1.0

    def thresholds(self, dim: int) -> Thresholds:
        return Thresholds(
            gamma=self.gamma,
            gamma0=self.gamma0,
            tau=self.tau,
            K=self.K,
            EK=self.EK,
            EK_minus=self.EK_minus,
            delta0=self.delta0,
            dim=dim,
        )


@dataclass
class StepState:
    cfg: ModelConfig
    sample: SigmaPoint
    N: NormalForm
    P1: TFSeries
    P2: TFSeries
    P3: TFSeries
    budget: Budget
    nu_index: int = 0
    generators: list = field(default_factory=list)  # composed flow data

    def perturbation(self) -> TFSeries:
        return self.P1 + self.P2 + self.P3

    def eps(self) -> float:
        dom = self.budget.dom
        return (
            self.P1.vecfield_norm(dom)
            + self.P2.vecfield_norm(dom)
            + self.P3.vecfield_norm(dom)
        )


@dataclass
class StepReport:
    nu: int
    eps_in: float
    eps_out: float
    eta: float
    eps_sched: float
    eps_sched_next: float
    F_norm: float
    Nhat_norm: float
    Rhat_norm: float
    residual_low: float
    residual_contract: float
    r_norm: float
    a5_ok: bool
    a5_counts: dict
    a5_violations: int
    a5_decay_rate: float
    a6_limit: float
    a6_max_scaled_deviation: float
    a6_ok: bool
    a7_norm: float
    a7_bound: float
    a7_ok: bool
    divisor_min_margin: float
    lie_orders_used: int
    tail_added: float
    omega_drift: float
    drift_bound: float
    fold_residual_norm: float
    block_hermiticity: float
    reality_defect: float
    neumann_iters: int
    n_terms_out: int
    wall_time: float
    accepted: bool
    reject_reason: str = ""

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, (int, float, bool, str)):
                out[k] = v
            elif isinstance(v, dict):
                out[k] = {str(a): b for a, b in v.items()}
        return out


def _extract_diag_deposit(raw: TFSeries, omega_shift: dict, budget: Budget) -> TFSeries:
    """Move rows of the form c(theta) w_n wbar_n out of a series into the
    per-site frequency deposit; returns the remainder."""
    bud = budget
    tb, b, S = bud.tb, bud.b, bud.n_sites
    amat = raw.keys[:, tb + b : tb + b + S]
    bmat = raw.keys[:, tb + b + S :]
    l_tot = raw.keys[:, tb : tb + b].astype(np.int64).sum(axis=1)
    diag = (
        (l_tot == 0)
        & ((amat.astype(np.int64) + bmat.astype(np.int64)).sum(axis=1) == 2)
        & (amat == bmat).all(axis=1)
    )
    if not diag.any():
        return raw
    for i in np.nonzero(diag)[0]:
        s_i = int(np.nonzero(amat[i])[0][0])
        site = int(bud.sites[s_i])
        kk = raw.keys[i : i + 1].copy()
        kk[:, tb:] = 0
        ser = omega_shift.get(site, TFSeries.zero(bud))
        omega_shift[site] = ser + TFSeries(bud, kk, raw.coefs[i : i + 1].copy())
    keep = ~diag
    return TFSeries(bud, raw.keys[keep], raw.coefs[keep], raw.tail)


def verify_A5(P1, P2, P3, ek: int, rho_bar: float, dom: Domain, eps_scale: float):
    return classify_structure(P1, P2, P3, ek, rho_bar, dom, eps_scale)


def verify_A6(P: TFSeries, dom: Domain, eps_scale: float, n_half=None):
    return toeplitz_lipschitz(P, dom, eps_scale, n_half=n_half)


# ---------------------------------------------------------------- Lie series


def lie_transform(
    N: NormalForm,
    P: TFSeries,
    F: TFSeries,
    g1: TFSeries,
    budget: Budget,
    tol: float,
    max_orders: int = 8,
):
    """Sum of the flow expansion beyond the solved first order:

        P+ = (P - R) + Rhat + sum_{m>=1} ad_F^m(g1) / (m+1)!
                            + sum_{j>=1} ad_F^j(P) / j!

    with g1 = Nhat - R + Rhat (the exactly-solved first-order bracket).
    Adaptive order: stops once the last term's majorant is below tol;
    raises StepRejected if the chain fails to contract geometrically.
    """
    dom = budget.dom
    drop = tol * 1e-9
    acc = TFSeries.zero(budget)
    a = g1
    bterm = P
    last = math.inf
    orders = 0
    for m in range(1, max_orders + 1):
        a = a.poisson(F).compress(drop)
        bterm = bterm.poisson(F).compress(drop)
        term = a.scaled(1.0 / math.factorial(m + 1)) + bterm.scaled(
            1.0 / math.factorial(m)
        )
        size = term.vecfield_norm(dom)
        acc = acc + term
        orders = m
        if size < tol:
            break
        if size > 0.9 * last and size > tol:
            raise StepRejected(
                f"flow expansion is not contracting (order {m}: {size:.3e})"
            )
        last = size
    else:
        raise StepRejected("flow expansion needed too many orders")
    return acc, orders


# ------------------------------------------------------------------ folding


def _fold_normal_form(
    N: NormalForm,
    nhat,
    budget: Budget,
    ek_new: int,
) -> tuple:
    """Deposit the solved means into (omega, c, f, blocks); the per-mode
    leftover after enforcing uniformity returns as quadratic rows for the
    new perturbation, so the Hamiltonian is preserved exactly."""
    d = budget.dim_sigma
    sites = [int(n) for n in budget.sites]

    omega_tilde_new = [w + dw for w, dw in zip(N.omega_tilde, nhat.omega_hat)]

    # full deposit at mode n is omega_shift[n] - |n| corr; the uniform part
    # u = mean_n(deposit_n / |n|) = M - corr, and the per-mode leftover
    # deposit_n - |n| u = omega_shift[n] - |n| M (corr cancels exactly)
    acc = TFSeries.zero(budget)
    for n in sites:
        ser = nhat.omega_shift.get(n)
        if ser is not None and ser.n_terms:
            acc = acc + ser.scaled(1.0 / abs(n))
    M = acc.scaled(1.0 / len(sites))
    u = M - nhat.corr

    zero_row = np.zeros(budget.ncols, dtype=np.int16)
    mean_mask = (
        (u.keys == zero_row[None, :]).all(axis=1) if u.n_terms else np.zeros(0, bool)
    )
    c_hat = ParamJet.constant(0.0, d)
    if u.n_terms and mean_mask.any():
        c_hat = ParamJet.from_array(u.coefs[mean_mask][0])
        u_osc = TFSeries(budget, u.keys[~mean_mask], u.coefs[~mean_mask], u.tail)
    else:
        u_osc = u
    c_new = N.c + c_hat
    f_new = N.f_theta + u_osc

    # exact leftover per mode
    residual_rows = []
    fold_norm = 0.0
    for n in sites:
        dep = nhat.omega_shift.get(n, TFSeries.zero(budget))
        resid = dep - M.scaled(float(abs(n)))
        if resid.n_terms:
            diag = TFSeries.from_terms(
                budget, [(MonoKey.make(budget, alpha={n: 1}, beta={n: 1}), 1.0)]
            )
            rows = diag.mul(resid)
            residual_rows.append(rows)
            fold_norm += rows.series_norm(budget.dom)

    blocks_new = {}
    for n_abs in range(1, min(ek_new, budget.n_max) + 1):
        bl_sites = []
        for s in (n_abs, -n_abs):
            if s not in budget.tangential and abs(s) <= budget.n_max:
                bl_sites.append(s)
        if not bl_sites:
            continue
        m = len(bl_sites)
        mat = np.zeros((m, m, 1 + d), dtype=np.complex128)
        if n_abs in N.blocks:
            old_sites, old_mat = N.blocks[n_abs]
            for i, p in enumerate(old_sites):
                for j, q in enumerate(old_sites):
                    mat[bl_sites.index(p), bl_sites.index(q)] += old_mat[i, j]
        if n_abs in nhat.block_updates:
            upd_sites, upd = nhat.block_updates[n_abs]
            for i, p in enumerate(upd_sites):
                for j, q in enumerate(upd_sites):
                    if p == q:
                        continue  # diagonal means already fold into (c, f)
                    mat[bl_sites.index(p), bl_sites.index(q)] += upd[i, j]
        # enforce Hermiticity exactly; the defect is reported upstream
        herm = 0.5 * (mat + np.conj(np.transpose(mat, (1, 0, 2))))
        blocks_new[n_abs] = (bl_sites, herm)

    N_new = NormalForm(
        omega_bar=list(N.omega_bar),
        omega_tilde=omega_tilde_new,
        c=c_new,
        f_theta=f_new,
        blocks=blocks_new,
        block_cut=ek_new,
    )
    residual = TFSeries.zero(budget)
    for rows in residual_rows:
        residual = residual + rows
    return N_new, residual, fold_norm


# ----------------------------------------------------------------- the step


def run_step(state: StepState, par: StepParams) -> tuple:
    """Execute one full step; returns (new state, report).

    Raises DivisorViolation when the sample hits a resonance and
    StepRejected when a contract fails (with the report attached).
    """
    t0 = time.monotonic()
    cfg = state.cfg
    bud = state.budget
    dom = bud.dom
    dim = cfg.dim_sigma
    thr = par.thresholds(dim)

    eps_in = state.eps()
    rparts = truncate_R(state.P1, state.P2, state.P3, thr)
    R = rparts.r_series()
    r_norm = R.vecfield_norm(dom)

    result = solve(state.N, rparts, thr, bud)
    F = result.F
    F_norm = F.vecfield_norm(dom)

    # whatever same-site mixed quadratic content the solve leaves behind
    # (resonant means, high-mode series, block cross-talk) is normal-form
    # material: split it off the exact residual into the deposit
    raw = poisson_nf(state.N, F, bud) + rparts.r_series() - result.nhat.series(bud)
    rhat = _extract_diag_deposit(raw, result.nhat.omega_shift, bud)
    nhat_series = result.nhat.series(bud)
    resid_low, resid_high = rhat.gamma_split(thr.K)
    residual_low = resid_low.series_norm(dom)
    residual_contract = residual_low / max(r_norm, 1e-300)

    # flow expansion beyond the solved order
    P = state.perturbation()
    g1 = nhat_series - R + rhat
    tol = 1e-3 * par.eta * max(par.eps_sched, eps_in)
    tail_mark = P.tail
    higher, orders = lie_transform(state.N, P, F, g1, bud, tol)

    remainder = rparts.rest1 + rparts.rest2 + rparts.rest3 + rparts.r_high_k
    P_next_raw = remainder + rhat + higher

    # fold solved means into the normal form; leftover rows rejoin P
    N_new, fold_resid, fold_norm = _fold_normal_form(
        state.N, result.nhat, bud, par.EK
    )
    P_next_raw = P_next_raw + fold_resid

    # move to the shrunk domain
    dom_next = Domain(par.r_next, par.s_next, par.rho_next, par.a)
    bud_next = bud.with_dom(dom_next)
    P_next = P_next_raw.rehome(bud_next)
    N_new.f_theta = N_new.f_theta.rehome(bud_next)

    c1, c2, c3, viol = classify_series(P_next, par.EK)
    P1n = TFSeries(bud_next, P_next.keys[c1 | viol], P_next.coefs[c1 | viol], P_next.tail)
    P2n = TFSeries(bud_next, P_next.keys[c2], P_next.coefs[c2], 0.0)
    P3n = TFSeries(bud_next, P_next.keys[c3], P_next.coefs[c3], 0.0)

    eps_out = (
        P1n.vecfield_norm(dom_next)
        + P2n.vecfield_norm(dom_next)
        + P3n.vecfield_norm(dom_next)
    )

    a5 = classify_structure(P1n, P2n, P3n, par.EK, cfg.rho_bar, dom_next, eps_out)
    a6 = toeplitz_lipschitz(P1n + P2n + P3n, dom_next, max(eps_out, 1e-300))
    a7 = shift_norm(N_new.f_theta, par.r_next, par.tau)
    gamma_next = 0.5 * par.gamma0 * (1.0 + 2.0 ** -(par.nu_index + 1))
    a7_bound = par.delta0 * max(par.gamma0 - gamma_next, 0.0)
    a7_ok = a7 <= a7_bound

    omega_drift = max((w.abs1() for w in result.nhat.omega_hat), default=0.0)
    from .structure import hermiticity_defect

    herm = hermiticity_defect(N_new.blocks)
    reality = max(P1n.reality_defect(dom_next) if P1n.n_terms else 0.0,
                  P2n.reality_defect(dom_next) if P2n.n_terms else 0.0,
                  P3n.reality_defect(dom_next) if P3n.n_terms else 0.0)

    accepted = True
    reason = ""
    if residual_contract > 1e-9:
        accepted, reason = False, f"solve residual {residual_contract:.2e} above 1e-9"
    elif eps_out > par.eta * max(par.eps_sched, eps_in):
        accepted, reason = (
            False,
            f"no contraction: eps_out {eps_out:.3e} > eta * eps_in "
            f"{par.eta * max(par.eps_sched, eps_in):.3e}",
        )
    elif not a5.ok:
        accepted, reason = False, "structure classes violated"
    elif not a6.ok:
        accepted, reason = False, "frequency-shift uniformity violated"
    elif omega_drift > par.drift_bound:
        accepted, reason = False, f"frequency drift {omega_drift:.3e} above bound"

    report = StepReport(
        nu=par.nu_index,
        eps_in=eps_in,
        eps_out=eps_out,
        eta=par.eta,
        eps_sched=par.eps_sched,
        eps_sched_next=par.eps_sched_next,
        F_norm=F_norm,
        Nhat_norm=nhat_series.vecfield_norm(dom),
        Rhat_norm=rhat.vecfield_norm(dom),
        residual_low=residual_low,
        residual_contract=residual_contract,
        r_norm=r_norm,
        a5_ok=a5.ok,
        a5_counts=a5.counts,
        a5_violations=a5.violations,
        a5_decay_rate=a5.forced_fit_rate,
        a6_limit=a6.limit_norm,
        a6_max_scaled_deviation=a6.max_scaled_deviation,
        a6_ok=a6.ok,
        a7_norm=a7,
        a7_bound=a7_bound,
        a7_ok=a7_ok,
        divisor_min_margin=result.min_margin,
        lie_orders_used=orders,
        tail_added=P_next.tail - tail_mark,
        omega_drift=omega_drift,
        drift_bound=par.drift_bound,
        fold_residual_norm=fold_norm,
        block_hermiticity=herm,
        reality_defect=reality,
        neumann_iters=result.neumann_iters,
        n_terms_out=P_next.n_terms,
        wall_time=time.monotonic() - t0,
        accepted=accepted,
        reject_reason=reason,
    )
    if not accepted:
        raise StepRejected(reason, report)

    new_state = StepState(
        cfg=cfg,
        sample=state.sample,
        N=N_new,
        P1=P1n,
        P2=P2n,
        P3=P3n,
        budget=bud_next,
        nu_index=state.nu_index + 1,
        generators=state.generators + [(F, bud)],
    )
    return new_state, report
