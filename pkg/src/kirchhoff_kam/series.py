"""Sparse Taylor-Fourier series algebra with majorant norms.

A series is a finite sum of monomials

    c(sigma) * e^{i<k,theta>} * I^l * w^alpha * wbar^beta

with jet-valued coefficients c (value + d/dsigma).  Storage is columnar:
one int16 key matrix (rows = terms, columns = k | l | alpha | beta) plus
one complex coefficient matrix, kept in a canonical row order so that
all reductions are deterministic regardless of construction order.

Norms are weighted-l1 majorants: coefficient magnitudes times
e^{|k| r} s^{2|l|} prod_n (s |n|^{-a} e^{-|n| rho})^{alpha_n + beta_n}.
Every lossy operation (degree cut, Fourier cap, explicit compression)
adds the majorant of what it dropped to ``tail`` and never removes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .jets import ParamJet, jet_abs1

__all__ = [
    "Domain",
    "Budget",
    "MonoKey",
    "TFSeries",
    "weighted_conv_norm",
]


@dataclass(frozen=True)
class Domain:
    """Analyticity widths: angle strip r, action/mode radius s, weights rho, a."""

    r: float
    s: float
    rho: float
    a: float = 1.0

    def __post_init__(self):
        if not (self.r > 0 and self.s > 0 and self.rho > 0):
            raise ValueError("domain widths must be positive")
        if self.a < 1.0:
            raise ValueError("weight power a must be >= 1 (abar = a-1 >= 0)")

    @property
    def abar(self) -> float:
        return self.a - 1.0


class BudgetMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=True)
class Budget:
    """Ambient truncation budget shared by all series of one run.

    tangential sites are excluded from the normal-mode columns; ``dom``
    is the domain used to weigh terms dropped by budget enforcement.
    """

    nu: int
    b: int
    tangential: tuple
    n_max: int = 32
    k_cap: int = 32
    d_cap: int = 6
    dom: Domain = Domain(0.5, 0.1, 0.25)

    def __post_init__(self):
        sites = tuple(
            n
            for n in range(-self.n_max, self.n_max + 1)
            if n not in self.tangential
        )
        object.__setattr__(self, "_sites", np.array(sites, dtype=np.int64))
        object.__setattr__(
            self, "_site_index", {int(n): i for i, n in enumerate(sites)}
        )

    @property
    def tb(self) -> int:
        return self.nu + self.b

    @property
    def dim_sigma(self) -> int:
        return self.nu + self.b

    @property
    def sites(self) -> np.ndarray:
        return self._sites

    @property
    def n_sites(self) -> int:
        return len(self._sites)

    def site_col(self, n: int) -> int:
        try:
            return self._site_index[int(n)]
        except KeyError:
            raise KeyError(f"mode {n} is tangential or beyond n_max") from None

    # column layout: k | l | alpha | beta
    @property
    def ncols(self) -> int:
        return self.tb + self.b + 2 * self.n_sites

    def col_k(self, j: int) -> int:
        return j

    def col_l(self, j: int) -> int:
        return self.tb + j

    def col_alpha(self, n: int) -> int:
        return self.tb + self.b + self.site_col(n)

    def col_beta(self, n: int) -> int:
        return self.tb + self.b + self.n_sites + self.site_col(n)

    def same_structure(self, other: "Budget") -> bool:
        return (
            self.nu == other.nu
            and self.b == other.b
            and self.tangential == other.tangential
            and self.n_max == other.n_max
            and self.k_cap == other.k_cap
            and self.d_cap == other.d_cap
        )

    def with_dom(self, dom: Domain) -> "Budget":
        return Budget(
            self.nu, self.b, self.tangential, self.n_max, self.k_cap, self.d_cap, dom
        )


@dataclass(frozen=True)
class MonoKey:
    """A single monomial index (sparse public form of one key row)."""

    k: tuple
    l: tuple
    alpha: tuple  # sorted ((n, exp), ...) with exp > 0
    beta: tuple

    def __post_init__(self):
        for part in (self.alpha, self.beta):
            for n, e in part:
                if e <= 0:
                    raise ValueError("zero exponents are never stored")

    @classmethod
    def make(cls, budget: Budget, k=(), l=(), alpha=None, beta=None) -> "MonoKey":
        k = tuple(int(x) for x in k) if k else (0,) * budget.tb
        l = tuple(int(x) for x in l) if l else (0,) * budget.b
        if len(k) != budget.tb or len(l) != budget.b:
            raise ValueError("k/l length mismatch")

        def canon(m):
            if not m:
                return ()
            out = []
            for n, e in sorted(m.items()):
                if int(n) in budget.tangential:
                    raise ValueError(f"exponent on tangential site {n}")
                if abs(int(n)) > budget.n_max:
                    raise ValueError(f"site {n} beyond n_max")
                if e:
                    out.append((int(n), int(e)))
            return tuple(out)

        return cls(k, l, canon(alpha), canon(beta))

    def row(self, budget: Budget) -> np.ndarray:
        r = np.zeros(budget.ncols, dtype=np.int16)
        r[: budget.tb] = self.k
        r[budget.tb : budget.tb + budget.b] = self.l
        for n, e in self.alpha:
            r[budget.col_alpha(n)] = e
        for n, e in self.beta:
            r[budget.col_beta(n)] = e
        return r

    @classmethod
    def from_row(cls, budget: Budget, row: np.ndarray) -> "MonoKey":
        tb, b, S = budget.tb, budget.b, budget.n_sites
        k = tuple(int(x) for x in row[:tb])
        l = tuple(int(x) for x in row[tb : tb + b])
        alpha = tuple(
            (int(budget.sites[i]), int(e))
            for i, e in enumerate(row[tb + b : tb + b + S])
            if e
        )
        beta = tuple(
            (int(budget.sites[i]), int(e))
            for i, e in enumerate(row[tb + b + S : tb + b + 2 * S])
            if e
        )
        return cls(k, l, alpha, beta)


def _void_view(keys: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(keys)
    return a.view(np.dtype((np.void, a.dtype.itemsize * a.shape[1]))).ravel()


def _canonical(keys, coefs, width):
    """Merge duplicate rows, drop exact zeros, sort rows canonically."""
    if keys.shape[0] == 0:
        return keys.reshape(0, keys.shape[1] if keys.ndim == 2 else 0), coefs
    v = _void_view(keys)
    uv, first, inverse = np.unique(v, return_index=True, return_inverse=True)
    out_keys = keys[first]
    out_coefs = np.zeros((len(uv), width), dtype=np.complex128)
    np.add.at(out_coefs, inverse, coefs)
    keep = np.abs(out_coefs).sum(axis=1) != 0.0
    return out_keys[keep], out_coefs[keep]


def _jet_mul_block(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(T,1+d) jet rows times a single flat jet b, product rule exact."""
    out = np.empty_like(A)
    out[:, 0] = A[:, 0] * b[0]
    out[:, 1:] = A[:, 1:] * b[0] + A[:, 0:1] * b[1:][None, :]
    return out


class TFSeries:
    """Immutable-by-convention sparse Taylor-Fourier series."""

    __slots__ = ("budget", "keys", "coefs", "tail")

    def __init__(self, budget: Budget, keys=None, coefs=None, tail: float = 0.0):
        self.budget = budget
        if keys is None:
            keys = np.zeros((0, budget.ncols), dtype=np.int16)
            coefs = np.zeros((0, 1 + budget.dim_sigma), dtype=np.complex128)
        self.keys = keys
        self.coefs = coefs
        self.tail = float(tail)

    # ---------------------------------------------------------------- build
    @classmethod
    def zero(cls, budget: Budget) -> "TFSeries":
        return cls(budget)

    @classmethod
    def from_terms(cls, budget: Budget, terms, tail: float = 0.0) -> "TFSeries":
        """terms: iterable of (MonoKey, coefficient) with jet or scalar coefs."""
        rows, cs = [], []
        d = budget.dim_sigma
        for key, c in terms:
            rows.append(key.row(budget))
            if isinstance(c, ParamJet):
                cs.append(c.to_array())
            else:
                flat = np.zeros(1 + d, dtype=np.complex128)
                flat[0] = complex(c)
                cs.append(flat)
        if not rows:
            return cls(budget, tail=tail)
        keys = np.array(rows, dtype=np.int16)
        coefs = np.array(cs, dtype=np.complex128)
        keys, coefs = _canonical(keys, coefs, 1 + d)
        return cls(budget, keys, coefs, tail)

    def terms(self):
        """Iterate (MonoKey, ParamJet) in canonical order."""
        for i in range(self.keys.shape[0]):
            yield (
                MonoKey.from_row(self.budget, self.keys[i]),
                ParamJet.from_array(self.coefs[i]),
            )

    def coefficient(self, key: MonoKey) -> ParamJet:
        row = key.row(self.budget)
        hit = np.nonzero((self.keys == row[None, :]).all(axis=1))[0]
        d = self.budget.dim_sigma
        if len(hit) == 0:
            return ParamJet.constant(0.0, d)
        return ParamJet.from_array(self.coefs[hit[0]])

    @property
    def n_terms(self) -> int:
        return self.keys.shape[0]

    def copy_with(self, keys, coefs, tail=None) -> "TFSeries":
        return TFSeries(self.budget, keys, coefs, self.tail if tail is None else tail)

    def _check_budget(self, other: "TFSeries"):
        if self.budget != other.budget:
            raise BudgetMismatch("operands live on different budgets")

    # ------------------------------------------------------------- column views
    def _knorm(self, keys=None) -> np.ndarray:
        keys = self.keys if keys is None else keys
        nu, tb = self.budget.nu, self.budget.tb
        k1 = np.abs(keys[:, :nu].astype(np.int64)).sum(axis=1)
        k2 = np.abs(keys[:, nu:tb].astype(np.int64)).sum(axis=1)
        return np.maximum(k1, k2)

    def _degree(self, keys=None) -> np.ndarray:
        keys = self.keys if keys is None else keys
        tb, b, S = self.budget.tb, self.budget.b, self.budget.n_sites
        l = keys[:, tb : tb + b].astype(np.int64).sum(axis=1)
        ab = keys[:, tb + b :].astype(np.int64).sum(axis=1)
        return 2 * l + ab

    def _log_weight(self, dom: Domain, keys=None) -> np.ndarray:
        """log of s^{2|l|} prod_n (s |n|^{-a} e^{-|n| rho})^{alpha_n+beta_n}."""
        keys = self.keys if keys is None else keys
        bud = self.budget
        tb, b, S = bud.tb, bud.b, bud.n_sites
        absn = np.abs(bud.sites).astype(np.float64)
        site_logw = math.log(dom.s) - dom.a * np.log(absn) - dom.rho * absn
        l = keys[:, tb : tb + b].astype(np.float64).sum(axis=1)
        ab = (keys[:, tb + b : tb + b + S] + keys[:, tb + b + S :]).astype(np.float64)
        return 2.0 * math.log(dom.s) * l + ab @ site_logw

    # ------------------------------------------------------------------ algebra
    def __add__(self, other: "TFSeries") -> "TFSeries":
        self._check_budget(other)
        keys = np.concatenate([self.keys, other.keys], axis=0)
        coefs = np.concatenate([self.coefs, other.coefs], axis=0)
        keys, coefs = _canonical(keys, coefs, coefs.shape[1])
        return TFSeries(self.budget, keys, coefs, self.tail + other.tail)

    def __sub__(self, other: "TFSeries") -> "TFSeries":
        return self + other.scaled(-1.0)

    def scaled(self, factor) -> "TFSeries":
        """Multiply by a sigma-independent scalar (exact, lossless)."""
        return TFSeries(
            self.budget, self.keys, self.coefs * complex(factor), abs(complex(factor)) * self.tail
        )

    def jet_scaled(self, jet: ParamJet) -> "TFSeries":
        coefs = _jet_mul_block(self.coefs, jet.to_array())
        return TFSeries(self.budget, self.keys.copy(), coefs, jet.abs1() * self.tail)

    def _budget_filter(self, keys, coefs):
        """Drop rows violating the budget; return their majorant weight."""
        bud = self.budget
        bad = (self._knorm(keys) > bud.k_cap) | (self._degree(keys) > bud.d_cap)
        if not bad.any():
            return keys, coefs, 0.0
        dom = bud.dom
        w = jet_abs1(coefs[bad]) * np.exp(
            self._knorm(keys[bad]) * dom.r + self._log_weight(dom, keys[bad])
        )
        return keys[~bad], coefs[~bad], float(np.sum(w))

    def mul(self, other: "TFSeries") -> "TFSeries":
        """Convolution product; budget overflow goes to the tail."""
        self._check_budget(other)
        big, small = (self, other) if self.n_terms >= other.n_terms else (other, self)
        blocks_k, blocks_c = [], []
        tail = 0.0
        for t in range(small.n_terms):
            keys = big.keys + small.keys[t][None, :]
            coefs = _jet_mul_block(big.coefs, small.coefs[t])
            keys, coefs, lost = self._budget_filter(keys, coefs)
            tail += lost
            blocks_k.append(keys)
            blocks_c.append(coefs)
        # lost-mass cross terms: |f|*g.tail + |g|*f.tail + f.tail*g.tail
        dom = self.budget.dom
        tail += (
            self.series_norm(dom) * other.tail
            + other.series_norm(dom) * self.tail
            + self.tail * other.tail
        )
        if not blocks_k:
            return TFSeries(self.budget, tail=tail)
        keys = np.concatenate(blocks_k, axis=0)
        coefs = np.concatenate(blocks_c, axis=0)
        keys, coefs = _canonical(keys, coefs, coefs.shape[1])
        return TFSeries(self.budget, keys, coefs, tail)

    # ------------------------------------------------------------- derivatives
    def d_I(self, j: int) -> "TFSeries":
        col = self.budget.col_l(j)
        mask = self.keys[:, col] > 0
        keys = self.keys[mask].copy()
        coefs = self.coefs[mask] * keys[:, col].astype(np.float64)[:, None]
        keys[:, col] -= 1
        return TFSeries(self.budget, keys, coefs, self.tail)

    def d_theta(self, j: int) -> "TFSeries":
        col = self.budget.col_k(j)
        mask = self.keys[:, col] != 0
        keys = self.keys[mask].copy()
        coefs = self.coefs[mask] * (1j * keys[:, col].astype(np.float64))[:, None]
        return TFSeries(self.budget, keys, coefs, self.tail)

    def d_w(self, n: int, bar: bool = False) -> "TFSeries":
        col = self.budget.col_beta(n) if bar else self.budget.col_alpha(n)
        mask = self.keys[:, col] > 0
        keys = self.keys[mask].copy()
        coefs = self.coefs[mask] * keys[:, col].astype(np.float64)[:, None]
        keys[:, col] -= 1
        return TFSeries(self.budget, keys, coefs, self.tail)

    # --------------------------------------------------------------- bracket
    def poisson(self, other: "TFSeries") -> "TFSeries":
        """{self, other} with the symplectic pairing of actions/angles and
        i * (d/dw_n wedge d/dwbar_n) on normal sites.

        Tangential action derivatives pair with the matching internal
        angles (k columns nu..nu+b-1); the forced angles carry no
        conjugate action inside a series, so they contribute only
        through explicit rotation terms handled by the normal form.
        """
        self._check_budget(other)
        if self.n_terms < other.n_terms:
            return other.poisson(self).scaled(-1.0)
        f, g = self, other
        bud = self.budget
        tb, b, S = bud.tb, bud.b, bud.n_sites
        d = bud.dim_sigma

        # index lists on the big side
        f_l_idx = [np.nonzero(f.keys[:, bud.col_l(j)] > 0)[0] for j in range(b)]
        f_kt_idx = [np.nonzero(f.keys[:, bud.col_k(bud.nu + j)] != 0)[0] for j in range(b)]
        a0, b0 = tb + b, tb + b + S
        f_a_idx = {}
        f_b_idx = {}

        blocks_k, blocks_c = [], []
        tail = 0.0

        def emit(rows_idx, row_factors, g_key_shift, g_factor_jet):
            nonlocal tail
            if len(rows_idx) == 0:
                return
            keys = f.keys[rows_idx] + g_key_shift[None, :]
            coefs = _jet_mul_block(
                f.coefs[rows_idx] * row_factors[:, None], g_factor_jet
            )
            keys, coefs, lost = self._budget_filter(keys, coefs)
            tail += lost
            blocks_k.append(keys)
            blocks_c.append(coefs)

        for t in range(g.n_terms):
            gk = g.keys[t]
            gc = g.coefs[t]
            # tangential action/angle channel; one action slot is consumed
            # whichever side it sits on, so the key shift is gk - e_{l_j}
            for j in range(b):
                lcol, kcol = bud.col_l(j), bud.col_k(bud.nu + j)
                gl, gkt = int(gk[lcol]), int(gk[kcol])
                if gkt != 0:
                    # + f_{I_j} * g_{theta_j}
                    idx = f_l_idx[j]
                    fac = f.keys[idx, lcol].astype(np.float64)
                    emit(idx, fac, gk - _unit_row(bud, lcol), gc * (1j * gkt))
                if gl > 0:
                    # - f_{theta_j} * g_{I_j}
                    idx = f_kt_idx[j]
                    fac = 1j * f.keys[idx, kcol].astype(np.float64)
                    emit(idx, -fac, gk - _unit_row(bud, lcol), gc * float(gl))
            # normal-site channel
            arow = gk[a0:b0]
            brow = gk[b0:]
            for s_i in np.nonzero(brow)[0]:
                # + i f_{w_n} g_{wbar_n}
                col_a, col_b = a0 + s_i, b0 + s_i
                if col_a not in f_a_idx:
                    f_a_idx[col_a] = np.nonzero(f.keys[:, col_a] > 0)[0]
                idx = f_a_idx[col_a]
                fac = f.keys[idx, col_a].astype(np.float64)
                shift = gk - _unit_row(bud, col_a) - _unit_row(bud, col_b)
                emit(idx, 1j * fac, shift, gc * float(brow[s_i]))
            for s_i in np.nonzero(arow)[0]:
                # - i f_{wbar_n} g_{w_n}
                col_a, col_b = a0 + s_i, b0 + s_i
                if col_b not in f_b_idx:
                    f_b_idx[col_b] = np.nonzero(f.keys[:, col_b] > 0)[0]
                idx = f_b_idx[col_b]
                fac = f.keys[idx, col_b].astype(np.float64)
                shift = gk - _unit_row(bud, col_a) - _unit_row(bud, col_b)
                emit(idx, -1j * fac, shift, gc * float(arow[s_i]))

        dom = bud.dom
        tail += (
            self.series_norm(dom) * other.tail
            + other.series_norm(dom) * self.tail
            + self.tail * other.tail
        )
        if not blocks_k:
            return TFSeries(bud, tail=tail)
        keys = np.concatenate(blocks_k, axis=0)
        coefs = np.concatenate(blocks_c, axis=0)
        keys, coefs = _canonical(keys, coefs, 1 + d)
        return TFSeries(bud, keys, coefs, tail)

    # ------------------------------------------------------------ truncation
    def gamma_split(self, K: int):
        """(low, high) with |k| <= K / |k| > K; exact partition.

        Accumulated tail rides with the high (remainder) part so the low
        part, which feeds exact solves, stays a pure stored-term object.
        """
        if K < 0:
            raise ValueError("K must be >= 0")
        kn = self._knorm()
        lo = kn <= K
        low = TFSeries(self.budget, self.keys[lo], self.coefs[lo], 0.0)
        high = TFSeries(self.budget, self.keys[~lo], self.coefs[~lo], self.tail)
        return low, high

    def compress(self, drop_below: float, dom: Domain | None = None) -> "TFSeries":
        """Drop terms whose weighted majorant is below `drop_below` (to tail)."""
        if self.n_terms == 0:
            return self
        dom = dom or self.budget.dom
        w = jet_abs1(self.coefs) * np.exp(
            self._knorm() * dom.r + self._log_weight(dom)
        )
        keep = w >= drop_below
        lost = float(np.sum(w[~keep]))
        return TFSeries(
            self.budget, self.keys[keep], self.coefs[keep], self.tail + lost
        )

    def rehome(self, new_budget: Budget) -> "TFSeries":
        """Move to a new tail-weighting domain; tail scaled by the worst-case
        weight ratio so it stays a majorant (and never shrinks)."""
        if not self.budget.same_structure(new_budget):
            raise BudgetMismatch("rehome cannot change structural budget")
        old, new = self.budget.dom, new_budget.dom
        factor = max(1.0, math.exp(self.budget.n_max * max(0.0, old.rho - new.rho)))
        return TFSeries(new_budget, self.keys, self.coefs, self.tail * factor)

    # ----------------------------------------------------------------- norms
    def series_norm(self, dom: Domain | None = None) -> float:
        dom = dom or self.budget.dom
        if self.n_terms == 0:
            return self.tail
        w = jet_abs1(self.coefs) * np.exp(self._knorm() * dom.r + self._log_weight(dom))
        return float(np.sum(w)) + self.tail

    def vecfield_norm(self, dom: Domain | None = None) -> float:
        """Majorant of the Hamiltonian vector-field norm
        ||F_I|| + s^-2 ||F_theta|| + s^-1 sum_n (||F_{w_n}||+||F_{wbar_n}||) |n|^abar e^{|n| rho}.
        The carried tail enters once, unscaled."""
        dom = dom or self.budget.dom
        if self.n_terms == 0:
            return self.tail
        bud = self.budget
        tb, b, S = bud.tb, bud.b, bud.n_sites
        base = jet_abs1(self.coefs) * np.exp(
            self._knorm() * dom.r + self._log_weight(dom)
        )
        s2 = dom.s * dom.s
        l_tot = self.keys[:, tb : tb + b].astype(np.float64).sum(axis=1)
        term_I = base * l_tot / s2
        k_abs = np.abs(self.keys[:, :tb].astype(np.float64)).sum(axis=1)
        term_th = base * k_abs / s2
        absn = np.abs(bud.sites).astype(np.float64)
        u = (absn ** (2.0 * dom.a - 1.0)) * np.exp(2.0 * dom.rho * absn) / s2
        ab = (self.keys[:, tb + b : tb + b + S] + self.keys[:, tb + b + S :]).astype(
            np.float64
        )
        term_w = base * (ab @ u)
        return float(np.sum(term_I) + np.sum(term_th) + np.sum(term_w)) + self.tail

    def coeff_norms(self, r: float):
        """Group rows by (l, alpha, beta): sum_k |coef|_C1 e^{|k| r} per group.

        Returns (group_keys int16 array without k columns, norms array).
        """
        if self.n_terms == 0:
            return np.zeros((0, self.budget.ncols - self.budget.tb), np.int16), np.zeros(0)
        tb = self.budget.tb
        gk = self.keys[:, tb:]
        v = _void_view(gk)
        uv, first, inverse = np.unique(v, return_index=True, return_inverse=True)
        w = jet_abs1(self.coefs) * np.exp(self._knorm() * r)
        out = np.zeros(len(uv))
        np.add.at(out, inverse, w)
        return gk[first], out

    # --------------------------------------------------------------- reality
    def conjugate_flip(self) -> "TFSeries":
        """The series whose value on the real domain is the complex conjugate:
        (k,l,alpha,beta) -> (-k,l,beta,alpha) with conjugated coefficients."""
        bud = self.budget
        tb, b, S = bud.tb, bud.b, bud.n_sites
        keys = self.keys.copy()
        keys[:, :tb] *= -1
        a = keys[:, tb + b : tb + b + S].copy()
        keys[:, tb + b : tb + b + S] = keys[:, tb + b + S :]
        keys[:, tb + b + S :] = a
        keys, coefs = _canonical(keys, np.conj(self.coefs), self.coefs.shape[1])
        return TFSeries(bud, keys, coefs, self.tail)

    def reality_defect(self, dom: Domain | None = None) -> float:
        """Relative majorant distance between the series and its conjugate flip."""
        dom = dom or self.budget.dom
        diff = self - self.conjugate_flip()
        denom = max(self.series_norm(dom), 1e-300)
        return (diff.series_norm(dom) - 2.0 * self.tail) / denom

    # ------------------------------------------------------------- evaluation
    def eval_value(self, theta, I=None, w=None, wbar=None) -> complex:
        """Value at a phase-space point (jet values only, no gradients)."""
        if self.n_terms == 0:
            return 0.0 + 0.0j
        bud = self.budget
        tb, b, S = bud.tb, bud.b, bud.n_sites
        theta = np.asarray(theta, dtype=np.float64)
        vals = self.coefs[:, 0] * np.exp(
            1j * (self.keys[:, :tb].astype(np.float64) @ theta)
        )
        if b:
            Iv = np.zeros(b, dtype=np.complex128) if I is None else np.asarray(I, np.complex128)
            lmat = self.keys[:, tb : tb + b].astype(np.int64)
            vals = vals * np.prod(Iv[None, :] ** lmat, axis=1)
        wv = np.zeros(S, dtype=np.complex128) if w is None else np.asarray(w, np.complex128)
        wb = np.zeros(S, dtype=np.complex128) if wbar is None else np.asarray(wbar, np.complex128)
        amat = self.keys[:, tb + b : tb + b + S].astype(np.int64)
        bmat = self.keys[:, tb + b + S :].astype(np.int64)
        if amat.any():
            vals = vals * np.prod(wv[None, :] ** amat, axis=1)
        if bmat.any():
            vals = vals * np.prod(wb[None, :] ** bmat, axis=1)
        return complex(np.sum(vals))

    # ---------------------------------------------------------- serialization
    def to_text(self) -> str:
        bud = self.budget
        lines = [
            "tfseries v1 nu=%d b=%d tangential=%s n_max=%d k_cap=%d d_cap=%d "
            "r=%s s=%s rho=%s a=%s tail=%s"
            % (
                bud.nu,
                bud.b,
                ",".join(str(t) for t in bud.tangential),
                bud.n_max,
                bud.k_cap,
                bud.d_cap,
                repr(bud.dom.r),
                repr(bud.dom.s),
                repr(bud.dom.rho),
                repr(bud.dom.a),
                repr(self.tail),
            )
        ]
        for key, jet in self.terms():
            gstr = ",".join(
                f"{repr(float(x.real))},{repr(float(x.imag))}" for x in jet.grad
            )
            astr = ",".join(f"{n}:{e}" for n, e in key.alpha)
            bstr = ",".join(f"{n}:{e}" for n, e in key.beta)
            lines.append(
                "k=%s l=%s alpha=%s beta=%s re=%s im=%s grad=%s"
                % (
                    ",".join(str(x) for x in key.k),
                    ",".join(str(x) for x in key.l),
                    astr,
                    bstr,
                    repr(float(jet.value.real)),
                    repr(float(jet.value.imag)),
                    gstr,
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TFSeries":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = dict(
            part.split("=", 1) for part in lines[0].split()[2:]
        )
        tang = tuple(int(x) for x in head["tangential"].split(",") if x)
        bud = Budget(
            nu=int(head["nu"]),
            b=int(head["b"]),
            tangential=tang,
            n_max=int(head["n_max"]),
            k_cap=int(head["k_cap"]),
            d_cap=int(head["d_cap"]),
            dom=Domain(
                float(head["r"]), float(head["s"]), float(head["rho"]), float(head["a"])
            ),
        )
        terms = []
        for ln in lines[1:]:
            fields = dict(part.split("=", 1) for part in ln.split())
            k = tuple(int(x) for x in fields["k"].split(","))
            l = tuple(int(x) for x in fields["l"].split(","))

            def parse_sparse(s):
                if not s:
                    return {}
                return {
                    int(p.split(":")[0]): int(p.split(":")[1]) for p in s.split(",")
                }

            alpha = parse_sparse(fields["alpha"])
            beta = parse_sparse(fields["beta"])
            val = complex(float(fields["re"]), float(fields["im"]))
            gparts = [float(x) for x in fields["grad"].split(",")] if fields["grad"] else []
            grad = np.array(
                [complex(gparts[2 * i], gparts[2 * i + 1]) for i in range(len(gparts) // 2)],
                dtype=np.complex128,
            )
            if grad.shape[0] != bud.dim_sigma:
                raise ValueError("gradient length mismatch in serialized term")
            terms.append(
                (MonoKey.make(bud, k, l, alpha, beta), ParamJet(val, grad))
            )
        return cls.from_terms(bud, terms, tail=float(head["tail"]))


def _unit_row(budget: Budget, col: int) -> np.ndarray:
    r = np.zeros(budget.ncols, dtype=np.int16)
    r[col] = 1
    return r


def weighted_conv_norm(p: dict, q: dict, a: float, rho: float):
    """(||p*q||_{a,rho}, ||p||_{a,rho}, ||q||_{a,rho}) by brute-force convolution.

    Supports are finite maps n -> value over nonzero integers; the index 0,
    if produced by the convolution, carries zero weight.
    """

    def norm(seq):
        return sum(
            abs(v) * (abs(n) ** a) * math.exp(abs(n) * rho) for n, v in seq.items()
        )

    conv: dict = {}
    for n1, v1 in p.items():
        if n1 == 0:
            raise ValueError("sequences live on nonzero integers")
        for n2, v2 in q.items():
            if n2 == 0:
                raise ValueError("sequences live on nonzero integers")
            conv[n1 + n2] = conv.get(n1 + n2, 0.0) + v1 * v2
    return norm(conv), norm(p), norm(q)
