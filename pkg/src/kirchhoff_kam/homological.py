"""Solve the linearized conjugacy equation {N, F} + R = Nhat.

The truncation R collects constant/action rows, first-order rows up to
the mode boundary, and quadratic rows (low pairs plus diagonal pairs
above the boundary).  Solutions divide Fourier coefficients by the
corresponding small divisors; angle-dependent normal frequencies are
removed by an integrating-factor phase, and block-coupled components are
solved as small exact jet linear systems (equivalent to rotating by the
block eigenbasis, without differentiating the rotation).

Everything is validated downstream by evaluating {N, F} + R - Nhat with
the exact bracket: the K-truncated part of that residual must vanish to
rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .jets import ParamJet
from .series import Budget, Domain, MonoKey, TFSeries, _canonical
from .model import NormalForm

__all__ = [
    "Thresholds",
    "Divisor",
    "DivisorViolation",
    "NeumannDivergence",
    "RParts",
    "truncate_R",
    "check_divisors",
    "solve",
    "block_diagonalize",
    "poisson_nf",
    "NhatData",
]


@dataclass(frozen=True)
class Thresholds:
    gamma: float
    gamma0: float
    tau: float
    K: int
    EK: int
    EK_minus: int
    delta0: float
    dim: int = 3

    def __post_init__(self):
        if not (self.gamma0 / 2 <= self.gamma <= self.gamma0):
            raise ValueError("gamma must lie in [gamma0/2, gamma0]")
        if self.tau <= self.dim + 2:
            raise ValueError("tau must exceed (nu + b) + 2")

    def d1(self, knorm: int) -> float:
        return self.gamma / float(knorm) ** self.tau

    def d2(self) -> float:
        return self.gamma0 / float(self.K) ** self.tau

    d3 = d2

    def d4(self, n: int) -> float:
        return self.gamma0 * abs(n) / float(self.K) ** self.tau


@dataclass
class Divisor:
    kind: str
    k: tuple
    n: int | None
    m: int | None
    value: complex
    threshold: float
    margin: float


class DivisorViolation(RuntimeError):
    def __init__(self, divisor: Divisor):
        self.divisor = divisor
        super().__init__(
            f"divisor {divisor.kind} at k={divisor.k} n={divisor.n} m={divisor.m}: "
            f"|{divisor.value:.6e}| < {divisor.threshold:.6e}"
        )


class NeumannDivergence(RuntimeError):
    pass


# ---------------------------------------------------------------- truncation


@dataclass
class RParts:
    """Truncation classes (already K-truncated in the angle index) and the
    per-class remainders so the structure partition can be reassembled."""

    r0: TFSeries
    r1: TFSeries
    r2_low: TFSeries
    r2_high: TFSeries
    rest1: TFSeries
    rest2: TFSeries
    rest3: TFSeries
    r_high_k: TFSeries  # R-class rows beyond the Fourier cutoff (unsolved)

    def r_series(self) -> TFSeries:
        return self.r0 + self.r1 + self.r2_low + self.r2_high

    def r_norm(self, dom: Domain) -> float:
        return self.r_series().vecfield_norm(dom)


def _r_masks(P: TFSeries, thr: Thresholds):
    bud = P.budget
    tb, b, S = bud.tb, bud.b, bud.n_sites
    keys = P.keys
    l_tot = keys[:, tb : tb + b].astype(np.int64).sum(axis=1)
    amat = keys[:, tb + b : tb + b + S].astype(np.int64)
    bmat = keys[:, tb + b + S :].astype(np.int64)
    ab = amat + bmat
    w_tot = ab.sum(axis=1)
    absn = np.abs(bud.sites)

    site_max = np.where(ab > 0, absn[None, :], 0).max(axis=1, initial=0)
    n_sites_touched = (ab > 0).sum(axis=1)
    diag_pair = (w_tot == 2) & (n_sites_touched == 1)

    m0 = (w_tot == 0) & (l_tot <= 1)
    m1 = (w_tot == 1) & (l_tot == 0) & (site_max <= thr.EK)
    m2_low = (
        (w_tot == 2)
        & (l_tot == 0)
        & (site_max <= thr.EK_minus)
    ) | (diag_pair & (l_tot == 0) & (site_max > thr.EK_minus) & (site_max <= thr.EK))
    m2_high = diag_pair & (l_tot == 0) & (site_max > thr.EK)
    return m0, m1, m2_low, m2_high


def truncate_R(P1: TFSeries, P2: TFSeries, P3: TFSeries, thr: Thresholds) -> RParts:
    bud = P1.budget
    parts = {"r0": [], "r1": [], "r2l": [], "r2h": [], "hk": []}
    rests = []
    for P in (P1, P2, P3):
        m0, m1, m2l, m2h = _r_masks(P, thr)
        in_r = m0 | m1 | m2l | m2h
        kn = P._knorm()
        solvable = kn <= thr.K
        for name, m in (("r0", m0), ("r1", m1), ("r2l", m2l), ("r2h", m2h)):
            sel = m & solvable
            parts[name].append((P.keys[sel], P.coefs[sel]))
        hi = in_r & ~solvable
        parts["hk"].append((P.keys[hi], P.coefs[hi]))
        keep = ~in_r
        rests.append(TFSeries(bud, P.keys[keep], P.coefs[keep], P.tail))

    def cat(blocks):
        if not blocks:
            return TFSeries.zero(bud)
        keys = np.concatenate([k for k, _ in blocks], axis=0)
        coefs = np.concatenate([c for _, c in blocks], axis=0)
        return TFSeries(bud, keys, coefs, 0.0)

    return RParts(
        r0=cat(parts["r0"]),
        r1=cat(parts["r1"]),
        r2_low=cat(parts["r2l"]),
        r2_high=cat(parts["r2h"]),
        rest1=rests[0],
        rest2=rests[1],
        rest3=rests[2],
        r_high_k=cat(parts["hk"]),
    )


# ------------------------------------------------------------------- blocks


def _hermitian_eig2(mat: np.ndarray):
    """Eigen data of a small Hermitian jet matrix.

    Returns (Q values, [eigenvalue jets]); first-order eigenvalue
    perturbation d lambda = v^H dA v gives exact jets.  Degenerate pairs
    keep the identity basis.
    """
    m = mat.shape[0]
    A = mat[:, :, 0]
    if m == 1:
        return np.eye(1, dtype=complex), [ParamJet.from_array(mat[0, 0])]
    evals, vecs = np.linalg.eigh(A)
    if abs(evals[0] - evals[1]) < 1e-14 * (1.0 + np.abs(A).max()):
        vecs = np.eye(m, dtype=complex)
        evals = np.diag(A).real
    d = mat.shape[2] - 1
    jets = []
    for i in range(m):
        v = vecs[:, i]
        grads = np.array(
            [v.conj() @ mat[:, :, 1 + s] @ v for s in range(d)], dtype=np.complex128
        )
        jets.append(ParamJet(evals[i], grads))
    return vecs, jets


def block_diagonalize(blocks: dict):
    """|n| -> (sites, Q, [d jets]) for every stored Hermitian block."""
    out = {}
    for n_abs, (sites, mat) in sorted(blocks.items()):
        herm = 0.5 * (mat[:, :, 0] + mat[:, :, 0].conj().T)
        defect = float(np.max(np.abs(mat[:, :, 0] - herm))) if mat.size else 0.0
        if defect > 1e-10 * (1.0 + np.abs(mat[:, :, 0]).max()):
            raise ValueError(f"block |n|={n_abs} is not Hermitian")
        Q, d = _hermitian_eig2(mat)
        out[n_abs] = (list(sites), Q, d)
    return out


def _block_sites(N: NormalForm, budget: Budget, n_abs: int):
    if n_abs in N.blocks:
        return list(N.blocks[n_abs][0])
    sites = []
    for s in (n_abs, -n_abs):
        if s in budget.tangential:
            continue
        if abs(s) <= budget.n_max:
            sites.append(s)
    return sites


def _block_matrix_jets(N: NormalForm, n_abs: int, sites, dim: int) -> np.ndarray:
    if n_abs in N.blocks:
        bsites, mat = N.blocks[n_abs]
        if list(bsites) == list(sites):
            return mat
        idx = [list(bsites).index(s) for s in sites]
        return mat[np.ix_(idx, idx)]
    m = len(sites)
    return np.zeros((m, m, 1 + dim), dtype=np.complex128)


# ------------------------------------------------------------- jet utilities


def _jet_div_rows(p: np.ndarray, dval: np.ndarray, dgrad: np.ndarray) -> np.ndarray:
    """Rowwise jet division p / d for flat jet rows."""
    out = np.empty_like(p)
    out[:, 0] = p[:, 0] / dval
    out[:, 1:] = (p[:, 1:] - out[:, 0:1] * dgrad) / dval[:, None]
    return out


def _solve_jet_linear(Mval, Mgrad, pval, pgrad):
    """Solve (M + dM) x = p + dp to first order: exact jet solution."""
    x = np.linalg.solve(Mval, pval)
    d = Mgrad.shape[0]
    xg = np.empty((d, x.shape[0]), dtype=np.complex128)
    for s in range(d):
        xg[s] = np.linalg.solve(Mval, pgrad[s] - Mgrad[s] @ x)
    return x, xg


def _omega_arrays(N: NormalForm):
    om = N.omega()
    vals = np.array([w.value for w in om])
    grads = np.array([w.grad for w in om])  # (tb, d)
    return vals, grads


def _kdot(kmat: np.ndarray, vals, grads):
    dv = kmat.astype(np.float64) @ vals
    dg = kmat.astype(np.float64) @ grads
    return dv, dg


# ----------------------------------------------------------------- exp(i T)


def _exp_series(g: TFSeries, tol: float = 1e-15, max_order: int = 40) -> TFSeries:
    bud = g.budget
    out = TFSeries.from_terms(bud, [(MonoKey.make(bud), 1.0)])
    term = TFSeries.from_terms(bud, [(MonoKey.make(bud), 1.0)])
    for m in range(1, max_order + 1):
        term = term.mul(g).scaled(1.0 / m)
        out = out + term
        if term.series_norm() < tol:
            return out
    raise NeumannDivergence("exponential series did not settle")


# -------------------------------------------------------------------- solve


@dataclass
class NhatData:
    omega_hat: list  # b jets
    const: ParamJet
    omega_shift: dict  # site n -> theta-only TFSeries (full frequency deposit)
    corr: TFSeries  # uniform correction g(theta); deposit is -|n| g per site
    block_updates: dict  # |n| -> (sites, (m, m, 1+d) jets)

    def series(self, budget: Budget) -> TFSeries:
        terms = []
        for j, wj in enumerate(self.omega_hat):
            l = [0] * budget.b
            l[j] = 1
            terms.append((MonoKey.make(budget, l=tuple(l)), wj))
        terms.append((MonoKey.make(budget), self.const))
        out = TFSeries.from_terms(budget, terms)
        rows = []
        for n, ser in sorted(self.omega_shift.items()):
            if ser.n_terms == 0:
                continue
            diag = TFSeries.from_terms(
                budget, [(MonoKey.make(budget, alpha={n: 1}, beta={n: 1}), 1.0)]
            )
            rows.append(diag.mul(ser))
        if self.corr.n_terms:
            for n in budget.sites:
                n = int(n)
                diag = TFSeries.from_terms(
                    budget,
                    [(MonoKey.make(budget, alpha={n: 1}, beta={n: 1}), -float(abs(n)))],
                )
                rows.append(diag.mul(self.corr))
        blk = []
        for n_abs, (sites, mat) in sorted(self.block_updates.items()):
            for i, p in enumerate(sites):
                for j, q in enumerate(sites):
                    jet = ParamJet.from_array(mat[i, j])
                    if jet.abs1() == 0.0 or p == q:
                        continue
                    blk.append((MonoKey.make(budget, alpha={p: 1}, beta={q: 1}), jet))
        if blk:
            out = out + TFSeries.from_terms(budget, blk)
        for r in rows:
            out = out + r
        return out


@dataclass
class SolveResult:
    F: TFSeries
    nhat: NhatData
    divisor_log: list
    min_margin: float
    neumann_iters: int


def poisson_nf(N: NormalForm, F: TFSeries, budget: Budget) -> TFSeries:
    """{N, F} including the forced rotation omega_bar . dF/dthetabar."""
    out = N.series_part(budget).poisson(F)
    for j, wj in enumerate(N.omega_bar):
        out = out + F.d_theta(j).jet_scaled(wj)
    return out


def _fourier_groups(series: TFSeries, group_cols):
    """Group rows by the non-k part of the key restricted to `group_cols`
    being equal; yields (group key bytes, row indices)."""
    if series.n_terms == 0:
        return {}
    sub = np.ascontiguousarray(series.keys[:, group_cols])
    view = sub.view(np.dtype((np.void, sub.dtype.itemsize * sub.shape[1]))).ravel()
    order = np.argsort(view, kind="stable")
    groups = {}
    sv = view[order]
    start = 0
    for i in range(1, len(sv) + 1):
        if i == len(sv) or sv[i] != sv[start]:
            groups[sv[start].tobytes()] = order[start:i]
            start = i
    return groups


def solve(
    N: NormalForm,
    rparts: RParts,
    thr: Thresholds,
    budget: Budget,
    log_margin_factor: float = 10.0,
) -> SolveResult:
    """Construct the generator F and the normal-form deposit Nhat."""
    bud = budget
    d = bud.dim_sigma
    tb, b, S = bud.tb, bud.b, bud.n_sites
    om_vals, om_grads = _omega_arrays(N)
    cbar = N.c + 1.0

    divisor_log: list = []
    min_margin = [math.inf]

    def check(kind, kvec, n, m, val_jet, threshold):
        value = val_jet.value if isinstance(val_jet, ParamJet) else complex(val_jet)
        margin = abs(value) - threshold
        rec = Divisor(kind, tuple(int(x) for x in kvec), n, m, value, threshold, margin)
        min_margin[0] = min(min_margin[0], margin)
        if margin < 0:
            raise DivisorViolation(rec)
        if margin < log_margin_factor * threshold:
            divisor_log.append(rec)
        return rec

    F_blocks_keys = []
    F_blocks_coefs = []

    def push_rows(keys, coefs):
        if keys.shape[0]:
            F_blocks_keys.append(keys.astype(np.int16))
            F_blocks_coefs.append(coefs)

    # ---------------- F0: pure action/angle rows -----------------------------
    r0 = rparts.r0
    omega_hat = [ParamJet.constant(0.0, d) for _ in range(b)]
    const = ParamJet.constant(0.0, d)
    if r0.n_terms:
        kn = r0._knorm()
        zero = kn == 0
        for i in np.nonzero(zero)[0]:
            l = r0.keys[i, tb : tb + b]
            jet = ParamJet.from_array(r0.coefs[i])
            if l.sum() == 0:
                const = const + jet
            else:
                j = int(np.nonzero(l)[0][0])
                omega_hat[j] = omega_hat[j] + jet
        nz = np.nonzero(~zero)[0]
        if len(nz):
            kmat = r0.keys[nz, :tb]
            dv, dg = _kdot(kmat, om_vals, om_grads)
            for idx, i in enumerate(nz):
                check("D1", kmat[idx], None, None, complex(dv[idx]), thr.d1(int(kn[i])))
            fhat = _jet_div_rows(1j * r0.coefs[nz], dv, dg)
            push_rows(r0.keys[nz], fhat)

    F0 = TFSeries(bud)
    if F_blocks_keys:
        keys = np.concatenate(F_blocks_keys, axis=0)
        coefs = np.concatenate(F_blocks_coefs, axis=0)
        keys, coefs = _canonical(keys, coefs, 1 + d)
        F0 = TFSeries(bud, keys, coefs)

    # integrating factor for the angle-dependent frequency part:
    # dT/domega = f  (per unit |n|), so e^{i m T} removes |n_eff| = m shifts
    f = N.f_theta
    T_f = TFSeries.zero(bud)
    if f.n_terms:
        kn = f._knorm()
        nz = np.nonzero(kn > 0)[0]
        kmat = f.keys[nz, :tb]
        dv, dg = _kdot(kmat, om_vals, om_grads)
        for idx in range(len(nz)):
            check("D1", kmat[idx], None, None, complex(dv[idx]), thr.d1(int(kn[nz[idx]])))
        coefs = _jet_div_rows(f.coefs[nz], 1j * dv, 1j * dg)
        T_f = TFSeries(bud, f.keys[nz].copy(), coefs)

    _u_cache: dict = {}

    def u_power(mshift: int) -> TFSeries | None:
        """e^{i * mshift * T_f} or None when it is identically 1."""
        if T_f.n_terms == 0 or mshift == 0:
            return None
        if mshift not in _u_cache:
            _u_cache[mshift] = _exp_series(T_f.scaled(1j * mshift))
        return _u_cache[mshift]

    def conj_phase(series_keys, series_coefs, mshift, inverse=False):
        """Multiply a packet of theta-rows by e^{+-i mshift T_f}."""
        U = u_power(-mshift if inverse else mshift)
        pack = TFSeries(bud, series_keys, series_coefs)
        if U is None:
            return pack
        return pack.mul(U)

    # ----------------------- F1: first-order rows ---------------------------
    group_cols = list(range(tb, bud.ncols))
    omega_shift: dict = {}
    block_upd: dict = {}

    r1 = rparts.r1
    if r1.n_terms:
        amat = r1.keys[:, tb + b : tb + b + S]
        bmat = r1.keys[:, tb + b + S :]
        site_of = np.where(
            amat.sum(axis=1)[:, None] > 0, amat, bmat
        ) @ np.arange(S)  # index of touched site column
        barside = bmat.sum(axis=1) > 0
        site_vals = bud.sites[site_of.astype(int)]
        done = np.zeros(r1.n_terms, dtype=bool)
        for n_abs in sorted(set(int(abs(s)) for s in site_vals)):
            sites = _block_sites(N, bud, n_abs)
            A = _block_matrix_jets(N, n_abs, sites, d)
            ombar = cbar * float(n_abs)
            for bar in (False, True):
                sel = np.nonzero(
                    (np.abs(site_vals) == n_abs) & (barside == bar) & ~done
                )[0]
                if len(sel) == 0:
                    continue
                done[sel] = True
                # assemble per-k right-hand vectors over the block sites
                kview = r1.keys[sel, :tb]
                packs = {}
                for idx, i in enumerate(sel):
                    kk = tuple(int(x) for x in kview[idx])
                    packs.setdefault(kk, {})[int(site_vals[i])] = r1.coefs[i]
                # remove the theta-dependent frequency by the phase;
                # shift sign: w-side carries e^{-i n T}... handled via mshift
                mshift = n_abs if not bar else -n_abs
                # build the full Fourier matrix of the phase-conjugated data
                rows_k, rows_c, rows_site = [], [], []
                for kk, persite in packs.items():
                    for site, coef in persite.items():
                        rows_k.append(kk)
                        rows_site.append(site)
                        rows_c.append(coef)
                pk = np.zeros((len(rows_k), bud.ncols), dtype=np.int16)
                pk[:, :tb] = np.array(rows_k, dtype=np.int16)
                pc = np.array(rows_c, dtype=np.complex128)
                # conjugate each site column separately (same phase for both)
                site_arr = np.array(rows_site)
                m = len(sites)
                Aval = A[:, :, 0]
                Agrad = np.transpose(A[:, :, 1:], (2, 0, 1))
                # phase-conjugate the packet jointly per site
                tilde = {}
                for site in sites:
                    rows = np.nonzero(site_arr == site)[0]
                    if len(rows) == 0:
                        tilde[site] = TFSeries(bud)
                        continue
                    tilde[site] = conj_phase(pk[rows], pc[rows], mshift, inverse=True)
                # collect the union of k rows
                kset = {}
                for site in sites:
                    ser = tilde[site]
                    for i in range(ser.n_terms):
                        kset.setdefault(tuple(int(x) for x in ser.keys[i, :tb]), {})[
                            site
                        ] = ser.coefs[i]
                Fsol = {site: [] for site in sites}
                for kk, persite in sorted(kset.items()):
                    kvec = np.array(kk)
                    knorm = max(
                        int(np.abs(kvec[: bud.nu]).sum()),
                        int(np.abs(kvec[bud.nu :]).sum()),
                    )
                    if knorm > thr.K:
                        continue  # stays as unsolved error content
                    dv = complex(kvec @ om_vals)
                    dgv = kvec @ om_grads
                    sgn = -1.0 if not bar else 1.0
                    # matrix [ <k,w> I + sgn (Ombar I + A or conj A) ]
                    Ablk = Aval if not bar else Aval.conj()
                    Agb = Agrad if not bar else Agrad.conj()
                    Mval = dv * np.eye(m) + sgn * (ombar.value * np.eye(m) + Ablk)
                    Mgrad = np.zeros((d, m, m), dtype=np.complex128)
                    for s in range(d):
                        Mgrad[s] = (dgv[s] + sgn * ombar.grad[s]) * np.eye(m) + sgn * Agb[s]
                    # divisor margins via block eigenvalues
                    _, djets = _hermitian_eig2(A)
                    for dj in djets:
                        val = dv + sgn * (ombar.value + dj.value)
                        check(
                            "D2",
                            kk,
                            int(n_abs) * (1 if not bar else -1),
                            None,
                            complex(val),
                            thr.d2(),
                        )
                    pval = np.array(
                        [persite.get(site, np.zeros(1 + d))[0] for site in sites]
                    )
                    pgrad = np.array(
                        [
                            [persite.get(site, np.zeros(1 + d))[1 + s] for site in sites]
                            for s in range(d)
                        ]
                    )
                    x, xg = _solve_jet_linear(Mval, Mgrad, 1j * pval, 1j * pgrad)
                    for si, site in enumerate(sites):
                        flat = np.zeros(1 + d, dtype=np.complex128)
                        flat[0] = x[si]
                        flat[1:] = xg[:, si]
                        if np.abs(flat).sum() == 0.0:
                            continue
                        Fsol[site].append((kk, flat))
                for site in sites:
                    if not Fsol[site]:
                        continue
                    kk = np.zeros((len(Fsol[site]), bud.ncols), dtype=np.int16)
                    cc = np.zeros((len(Fsol[site]), 1 + d), dtype=np.complex128)
                    for i, (kv, flat) in enumerate(Fsol[site]):
                        kk[i, :tb] = kv
                        cc[i] = flat
                    back = conj_phase(kk, cc, mshift, inverse=False)
                    col = bud.col_beta(site) if bar else bud.col_alpha(site)
                    out_keys = back.keys.copy()
                    out_keys[:, col] += 1
                    push_rows(out_keys, back.coefs)

    # ------------------- F2 low: quadratic pair rows ------------------------
    r2 = rparts.r2_low
    if r2.n_terms:
        _solve_quadratic_low(
            N,
            r2,
            thr,
            bud,
            cbar,
            om_vals,
            om_grads,
            conj_phase,
            check,
            push_rows,
            omega_shift,
            block_upd,
        )

    # ------------------- F2 high: diagonal pairs beyond the boundary --------
    neumann_iters = 0
    r2h = rparts.r2_high
    if r2h.n_terms:
        neumann_iters = _solve_quadratic_high(
            N,
            r2h,
            thr,
            bud,
            cbar,
            om_vals,
            om_grads,
            check,
            push_rows,
            omega_shift,
        )

    # assemble F
    if F_blocks_keys:
        keys = np.concatenate(F_blocks_keys, axis=0)
        coefs = np.concatenate(F_blocks_coefs, axis=0)
        keys, coefs = _canonical(keys, coefs, 1 + d)
        F = TFSeries(bud, keys, coefs)
    else:
        F = TFSeries(bud)

    # frequency correction from the action-angle coupling of F0 with the
    # angle-dependent frequency: corr = sum_j d f/d th_j * d F0/d I_j
    corr = TFSeries.zero(bud)
    if f.n_terms and F0.n_terms:
        for j in range(b):
            part = f.d_theta(bud.nu + j).mul(F0.d_I(j))
            corr = corr + part

    nhat = NhatData(
        omega_hat=omega_hat,
        const=const,
        omega_shift=omega_shift,
        corr=corr,
        block_updates=block_upd,
    )
    return SolveResult(
        F=F,
        nhat=nhat,
        divisor_log=divisor_log,
        min_margin=min_margin[0],
        neumann_iters=neumann_iters,
    )


def _solve_quadratic_low(
    N,
    r2,
    thr,
    bud,
    cbar,
    om_vals,
    om_grads,
    conj_phase,
    check,
    push_rows,
    omega_shift,
    block_upd,
):
    """Pair rows below the boundary, solved blockwise per (kind, |n|, |m|).

    Resonant means (zero Fourier mode on equal-|n| mixed rows) are moved
    into the normal-form deposit instead of being divided.
    """
    tb, b, S = bud.tb, bud.b, bud.n_sites
    d = bud.dim_sigma
    amat = r2.keys[:, tb + b : tb + b + S].astype(np.int64)
    bmat = r2.keys[:, tb + b + S :].astype(np.int64)
    groups: dict = {}
    for i in range(r2.n_terms):
        arow, brow = amat[i], bmat[i]
        asum, bsum = int(arow.sum()), int(brow.sum())
        factors = []
        for s_i in np.nonzero(arow)[0]:
            factors += [("w", int(bud.sites[s_i]))] * int(arow[s_i])
        for s_i in np.nonzero(brow)[0]:
            factors += [("wb", int(bud.sites[s_i]))] * int(brow[s_i])
        if asum == 2:
            kind = "20"
            (t1, p), (t2, q) = factors
        elif bsum == 2:
            kind = "02"
            (t1, p), (t2, q) = factors
        else:
            kind = "11"
            p = [s for t, s in factors if t == "w"][0]
            q = [s for t, s in factors if t == "wb"][0]
        if kind in ("20", "02") and abs(p) < abs(q):
            p, q = q, p
        groups.setdefault((kind, abs(p), abs(q)), []).append((i, p, q))

    for (kind, n_abs, m_abs), rows in sorted(groups.items()):
        sn = _block_sites(N, bud, n_abs)
        sm = _block_sites(N, bud, m_abs)
        An = _block_matrix_jets(N, n_abs, sn, d)
        Am = _block_matrix_jets(N, m_abs, sm, d)
        mn, mm = len(sn), len(sm)
        ombar_n = cbar * float(n_abs)
        ombar_m = cbar * float(m_abs)
        if kind == "20":
            mshift = n_abs + m_abs
            sgn_n, sgn_m = -1.0, -1.0
        elif kind == "02":
            mshift = -(n_abs + m_abs)
            sgn_n, sgn_m = +1.0, +1.0
        else:
            mshift = n_abs - m_abs
            sgn_n, sgn_m = -1.0, +1.0

        # entry series with the split convention on square w-pair blocks;
        # same-site mixed rows are normal-form material (deposited by the
        # caller from the exact residual) and never enter the solve
        entries: dict = {}
        square_sym = kind in ("20", "02") and n_abs == m_abs
        for i, p, q in rows:
            weight = 1.0
            if kind == "11" and p == q:
                continue
            if kind in ("20", "02"):
                if square_sym and p != q:
                    weight = 0.5
                targets = [(p, q)] if not square_sym or p == q else [(p, q), (q, p)]
            else:
                targets = [(p, q)]
            for tp, tq in targets:
                entries.setdefault((tp, tq), []).append(
                    (r2.keys[i, :tb].copy(), r2.coefs[i] * weight)
                )

        tilde: dict = {}
        for (p, q), lst in entries.items():
            kk = np.zeros((len(lst), bud.ncols), dtype=np.int16)
            cc = np.zeros((len(lst), 1 + d), dtype=np.complex128)
            for j, (kv, cv) in enumerate(lst):
                kk[j, :tb] = kv
                cc[j] = cv
            tilde[(p, q)] = conj_phase(kk, cc, mshift, inverse=True)

        kset: dict = {}
        for (p, q), ser in tilde.items():
            for i in range(ser.n_terms):
                kv = tuple(int(x) for x in ser.keys[i, :tb])
                kset.setdefault(kv, {})[(p, q)] = ser.coefs[i]

        _, djets_n = _hermitian_eig2(An)
        _, djets_m = _hermitian_eig2(Am)

        sol: dict = {}
        for kv, permat in sorted(kset.items()):
            kvec = np.array(kv)
            knorm = max(
                int(np.abs(kvec[: bud.nu]).sum()), int(np.abs(kvec[bud.nu :]).sum())
            )
            if knorm > thr.K:
                continue
            resonant = kind == "11" and n_abs == m_abs and knorm == 0 and not kvec.any()
            if resonant:
                # cross means feed the Hermitian blocks of the normal form
                for (p, q), flat in permat.items():
                    sites, mat = block_upd.setdefault(
                        n_abs,
                        (sn, np.zeros((mn, mn, 1 + d), dtype=np.complex128)),
                    )
                    mat[sites.index(p), sites.index(q)] += flat
                continue
            dv = complex(kvec @ om_vals)
            dgv = kvec @ om_grads
            for di in djets_n:
                for dj in djets_m:
                    val = (
                        dv
                        + sgn_n * (ombar_n.value + di.value)
                        + sgn_m * (ombar_m.value + dj.value)
                    )
                    if kind == "11" and knorm == 0 and n_abs == m_abs:
                        continue
                    check(
                        "D3" if kind == "11" else "D3",
                        kv,
                        n_abs,
                        m_abs,
                        complex(val),
                        thr.d3(),
                    )
            Ln_val = ombar_n.value * np.eye(mn) + An[:, :, 0]
            Rm_val = ombar_m.value * np.eye(mm) + Am[:, :, 0]
            if kind == "02":
                Ln_val = ombar_n.value * np.eye(mn) + An[:, :, 0].T
            # operator on vec(F), row-major: <k,w> I + sgn_n L (x) I + sgn_m I (x) R^T
            if kind == "11":
                Rop_val = Rm_val
            elif kind == "20":
                Rop_val = ombar_m.value * np.eye(mm) + Am[:, :, 0].T
            else:
                Rop_val = ombar_m.value * np.eye(mm) + Am[:, :, 0]
            Mval = (
                dv * np.eye(mn * mm)
                + sgn_n * np.kron(Ln_val, np.eye(mm))
                + sgn_m * np.kron(np.eye(mn), Rop_val.T)
            )
            Mgrad = np.zeros((d, mn * mm, mn * mm), dtype=np.complex128)
            for s in range(d):
                Ln_g = ombar_n.grad[s] * np.eye(mn) + (
                    An[:, :, 1 + s].T if kind == "02" else An[:, :, 1 + s]
                )
                if kind == "11":
                    Rg = ombar_m.grad[s] * np.eye(mm) + Am[:, :, 1 + s]
                elif kind == "20":
                    Rg = ombar_m.grad[s] * np.eye(mm) + Am[:, :, 1 + s].T
                else:
                    Rg = ombar_m.grad[s] * np.eye(mm) + Am[:, :, 1 + s]
                Mgrad[s] = (
                    dgv[s] * np.eye(mn * mm)
                    + sgn_n * np.kron(Ln_g, np.eye(mm))
                    + sgn_m * np.kron(np.eye(mn), Rg.T)
                )
            pval = np.zeros(mn * mm, dtype=np.complex128)
            pgrad = np.zeros((d, mn * mm), dtype=np.complex128)
            for (p, q), flat in permat.items():
                pos = sn.index(p) * mm + sm.index(q)
                pval[pos] = flat[0]
                pgrad[:, pos] = flat[1:]
            x, xg = _solve_jet_linear(Mval, Mgrad, 1j * pval, 1j * pgrad)
            for pi, p in enumerate(sn):
                for qi, q in enumerate(sm):
                    pos = pi * mm + qi
                    flat = np.zeros(1 + d, dtype=np.complex128)
                    flat[0] = x[pos]
                    flat[1:] = xg[:, pos]
                    if np.abs(flat).sum() == 0.0:
                        continue
                    sol.setdefault((p, q), []).append((kv, flat))

        for (p, q), lst in sol.items():
            kk = np.zeros((len(lst), bud.ncols), dtype=np.int16)
            cc = np.zeros((len(lst), 1 + d), dtype=np.complex128)
            for j, (kv, cv) in enumerate(lst):
                kk[j, :tb] = kv
                cc[j] = cv
            back = conj_phase(kk, cc, mshift, inverse=False)
            out_keys = back.keys.copy()
            if kind == "20":
                out_keys[:, bud.col_alpha(p)] += 1
                out_keys[:, bud.col_alpha(q)] += 1
            elif kind == "02":
                out_keys[:, bud.col_beta(p)] += 1
                out_keys[:, bud.col_beta(q)] += 1
            else:
                out_keys[:, bud.col_alpha(p)] += 1
                out_keys[:, bud.col_beta(q)] += 1
            push_rows(out_keys, back.coefs)


def _solve_quadratic_high(
    N, r2h, thr, bud, cbar, om_vals, om_grads, check, push_rows, omega_shift
):
    """Diagonal pairs beyond the boundary: the mixed row feeds the normal
    form, the two squared rows solve (Lambda + D) Fhat = i Phat by Neumann
    iteration off the diagonal."""
    tb, b, S = bud.tb, bud.b, bud.n_sites
    d = bud.dim_sigma
    f = N.f_theta
    amat = r2h.keys[:, tb + b : tb + b + S].astype(np.int64)
    bmat = r2h.keys[:, tb + b + S :].astype(np.int64)
    per_site: dict = {}
    for i in range(r2h.n_terms):
        s_i = int(np.nonzero(amat[i] + bmat[i])[0][0])
        site = int(bud.sites[s_i])
        asum = int(amat[i].sum())
        kind = {2: "20", 1: "11", 0: "02"}[asum]
        per_site.setdefault((site, kind), []).append(i)

    iters_total = 0
    for (site, kind), rows in sorted(per_site.items()):
        if kind == "11":
            continue  # diagonal mixed rows deposit into the normal form
        n_abs = abs(site)
        ombar2 = (cbar * (2.0 * n_abs)).to_array()
        sgn = -1.0 if kind == "20" else +1.0
        # closure of the Fourier support under frequency-shift convolution
        kset = {tuple(int(x) for x in r2h.keys[i, :tb]) for i in rows}
        fmodes = [
            (tuple(int(x) for x in f.keys[i, :tb]), f.coefs[i])
            for i in range(f.n_terms)
        ]
        frontier = set(kset)
        for _ in range(8):
            new = set()
            for kv in frontier:
                for fk, _c in fmodes:
                    cand = tuple(a + bb for a, bb in zip(kv, fk))
                    kn = max(
                        sum(abs(x) for x in cand[: bud.nu]),
                        sum(abs(x) for x in cand[bud.nu :]),
                    )
                    if kn <= thr.K and cand not in kset:
                        new.add(cand)
            if not new:
                break
            kset |= new
            frontier = new
        klist = sorted(kset)
        kindex = {kv: i for i, kv in enumerate(klist)}
        nk = len(klist)
        kmat = np.array(klist, dtype=np.int64)
        dv = kmat @ om_vals
        dg = kmat @ om_grads
        lam_val = dv + sgn * ombar2[0]
        lam_grad = dg + sgn * ombar2[None, 1:]
        for i, kv in enumerate(klist):
            check("D4", kv, site, None, complex(lam_val[i]), thr.d4(site))
        p = np.zeros((nk, 1 + d), dtype=np.complex128)
        for i in rows:
            kv = tuple(int(x) for x in r2h.keys[i, :tb])
            p[kindex[kv]] += 1j * r2h.coefs[i]
        # D x = sgn * 2 |n| (f * x) as a convolution over the k grid
        shifts = []
        for fk, fc in fmodes:
            src, dst = [], []
            for kv, i in kindex.items():
                cand = tuple(a + bb for a, bb in zip(kv, fk))
                j = kindex.get(cand)
                if j is not None:
                    src.append(i)
                    dst.append(j)
            shifts.append((np.array(src, int), np.array(dst, int), fc))

        def apply_D(x):
            out = np.zeros_like(x)
            for src, dst, fc in shifts:
                if len(src):
                    block = np.empty((len(src), x.shape[1]), dtype=np.complex128)
                    block[:, 0] = x[src, 0] * fc[0]
                    block[:, 1:] = x[src, 1:] * fc[0] + x[src, 0:1] * fc[None, 1:]
                    np.add.at(out, dst, block)
            return out * (sgn * 2.0 * n_abs)

        x = _jet_div_rows(p, lam_val, lam_grad)
        if shifts:
            for it in range(200):
                x_new = _jet_div_rows(p - apply_D(x), lam_val, lam_grad)
                delta = np.abs(x_new - x).sum()
                scale = np.abs(x_new).sum() + 1e-300
                x = x_new
                iters_total += 1
                if delta <= 1e-12 * scale:
                    break
            else:
                raise NeumannDivergence(
                    f"high-mode solve at n={site} did not contract"
                )
        keep = np.abs(x).sum(axis=1) > 0
        out_keys = np.zeros((int(keep.sum()), bud.ncols), dtype=np.int16)
        out_keys[:, :tb] = kmat[keep]
        col = bud.col_alpha(site) if kind == "20" else bud.col_beta(site)
        out_keys[:, col] = 2
        push_rows(out_keys, x[keep])
    return iters_total


# ------------------------------------------------------------- enumeration


def enumerate_k(nu: int, b: int, K: int, include_zero: bool = False):
    """All k with max(|k1|_1, |k2|_1) <= K."""

    def block(dim, cap):
        if dim == 0:
            yield ()
            return
        for head in range(-cap, cap + 1):
            for rest in block(dim - 1, cap - abs(head)):
                yield (head,) + rest

    out = []
    for k1 in block(nu, K):
        for k2 in block(b, K):
            k = k1 + k2
            if not include_zero and not any(k):
                continue
            out.append(k)
    return out


def check_divisors(
    N: NormalForm,
    thr: Thresholds,
    budget: Budget,
    k_list=None,
    n_max_d4: int | None = None,
    log_margin_factor: float = 10.0,
):
    """Enumerate the four divisor families with values and margins.

    Returns (records below log_margin_factor * threshold, per-family
    minimum margins).  Raises nothing: report only.
    """
    if k_list is None:
        k_list = enumerate_k(budget.nu, budget.b, thr.K)
    om_vals, om_grads = _omega_arrays(N)
    kmat = np.array(k_list, dtype=np.int64)
    knorm = np.maximum(
        np.abs(kmat[:, : budget.nu]).sum(axis=1), np.abs(kmat[:, budget.nu :]).sum(axis=1)
    )
    dv = (kmat @ om_vals).real

    eig = block_diagonalize(N.blocks)
    cval = N.c.value.real

    def dval(n: int) -> float:
        n_abs = abs(n)
        base = n_abs * (1.0 + cval)
        if n_abs in eig:
            sites, _Q, jets = eig[n_abs]
            if n in sites:
                # eigenvalues ordered with the site list for reporting
                return base + jets[sites.index(n)].value.real
        return base

    records = []
    minima = {"D1": math.inf, "D2": math.inf, "D3": math.inf, "D4": math.inf}

    def note(kind, kv, n, m, value, threshold):
        margin = abs(value) - threshold
        minima[kind] = min(minima[kind], margin)
        if margin < log_margin_factor * threshold:
            records.append(Divisor(kind, tuple(kv), n, m, value, threshold, margin))

    nz = knorm > 0
    th1 = np.where(nz, thr.gamma / np.maximum(knorm, 1).astype(float) ** thr.tau, 0.0)
    margins1 = np.abs(dv) - th1
    minima["D1"] = float(margins1[nz].min()) if nz.any() else math.inf
    for i in np.nonzero(nz & (margins1 < log_margin_factor * th1))[0]:
        records.append(
            Divisor("D1", tuple(int(x) for x in kmat[i]), None, None, complex(dv[i]), float(th1[i]), float(margins1[i]))
        )

    sites_all = [int(n) for n in budget.sites]
    low_sites = [n for n in sites_all if abs(n) <= thr.EK]
    base2 = np.array([dval(n) for n in low_sites])
    th2 = thr.d2()
    for sgn in (+1.0, -1.0):
        vals = dv[:, None] + sgn * base2[None, :]
        margins = np.abs(vals) - th2
        minima["D2"] = min(minima["D2"], float(margins.min()))
        for i, j in zip(*np.nonzero(margins < log_margin_factor * th2)):
            note("D2", [int(x) for x in kmat[i]], low_sites[j], None, complex(vals[i, j]), th2)

    th3 = thr.d3()
    nvals = np.array(low_sites)
    for s1 in (+1.0, -1.0):
        for s2 in (+1.0, -1.0):
            offs = s1 * base2[:, None] + s2 * base2[None, :]
            vals = dv[:, None, None] + offs[None, :, :]
            margins = np.abs(vals) - th3
            excl = (knorm[:, None, None] == 0) & (
                np.abs(nvals)[None, :, None] == np.abs(nvals)[None, None, :]
            ) & (s1 * s2 < 0)
            margins = np.where(excl, np.inf, margins)
            minima["D3"] = min(minima["D3"], float(margins.min()))
            hits = np.nonzero(margins < log_margin_factor * th3)
            for i, j, l in zip(*hits):
                note(
                    "D3",
                    [int(x) for x in kmat[i]],
                    low_sites[j],
                    low_sites[l],
                    complex(vals[i, j, l]),
                    th3,
                )

    hi_sites = [n for n in sites_all if abs(n) > thr.EK]
    if n_max_d4 is not None:
        hi_sites = [n for n in hi_sites if abs(n) <= n_max_d4]
    for n in hi_sites:
        base = 2.0 * abs(n) * (1.0 + cval)
        th4 = thr.d4(n)
        for sgn in (+1.0, -1.0):
            vals = dv + sgn * base
            margins = np.abs(vals) - th4
            minima["D4"] = min(minima["D4"], float(margins.min()))
            for i in np.nonzero(margins < log_margin_factor * th4)[0]:
                note("D4", [int(x) for x in kmat[i]], n, None, complex(vals[i]), th4)

    return records, minima
