"""Drive the full iteration: shrink schedule, per-sample step loop,
composition of the transformations, and extraction of the invariant
torus with its limit frequencies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .jets import ParamJet
from .series import Budget, Domain, MonoKey, TFSeries
from .model import ModelConfig, NormalForm, SigmaPoint, build_hamiltonian, verify_assumptions
from .homological import DivisorViolation, NeumannDivergence, block_diagonalize
from .step import StepParams, StepRejected, StepState, run_step

__all__ = [
    "GateViolation",
    "Schedule",
    "make_schedule",
    "run",
    "RunHistory",
    "extract_torus",
    "TorusData",
]


class GateViolation(RuntimeError):
    def __init__(self, gate: str, detail: str):
        self.gate = gate
        self.detail = detail
        super().__init__(f"smallness gate '{gate}' violated: {detail}")


@dataclass
class Schedule:
    eps0: float
    r0: float
    s0: float
    rho0: float
    gamma0: float
    E0: float
    beta_prime: float
    tau: float
    delta0: float
    nu_max: int
    kappa: float
    B_const: float
    r: list
    varrho: list
    rho: list
    gamma: list
    E: list
    B: list
    eps: list
    eta: list
    K: list
    EK: list
    s: list
    drift: list
    gates: dict

    def params(self, nu: int, a: float = 1.0) -> StepParams:
        return StepParams(
            nu_index=nu,
            r=self.r[nu],
            s=self.s[nu],
            rho=self.rho[nu],
            r_next=self.r[nu + 1],
            s_next=self.s[nu + 1],
            rho_next=self.rho[nu + 1],
            gamma=self.gamma[nu],
            gamma0=self.gamma0,
            tau=self.tau,
            delta0=self.delta0,
            K=self.K[nu],
            EK=self.EK[nu],
            EK_minus=self.EK[nu - 1] if nu > 0 else 1,
            eta=self.eta[nu],
            eps_sched=self.eps[nu],
            eps_sched_next=self.eps[nu + 1],
            drift_bound=self.drift[nu],
            a=a,
        )

    def domain(self, nu: int, a: float = 1.0) -> Domain:
        return Domain(self.r[nu], self.s[nu], self.rho[nu], a)


def make_schedule(
    eps0: float,
    r0: float,
    s0: float,
    rho0: float,
    gamma0: float,
    E0: float,
    beta_prime: float,
    nu_max: int,
    tau: float,
    delta0: float,
    rho_bar: float,
    n_max: int = 32,
    k_step_cap: int = 6,
    b_margin: float = 0.5,
    product_terms: int = 64,
) -> Schedule:
    """Materialize the shrink sequences and check every smallness gate.

    The growth constant in B is calibrated so the eps0 gate holds with
    the requested margin; B keeps the step-zero strip width (the literal
    per-step width collapse makes the budget sequence useless at finite
    precision, while the step-zero value preserves the contraction
    exponent kappa).
    """
    if not (0.0 < beta_prime <= 0.25):
        raise GateViolation("beta_range", f"0 < beta' <= 1/4 required, got {beta_prime}")
    kappa = 4.0 / 3.0 - beta_prime / 3.0
    if eps0 >= 1.0:
        raise GateViolation("eps0_range", "eps0 must be below one")

    nus = list(range(nu_max + 2))
    r = [r0 / 2**n for n in nus]
    varrho = [rv / 20.0 for rv in r]
    rho = [rho0 * (1.0 - sum(2.0**-i for i in range(2, n + 2))) for n in nus]
    gamma = [0.5 * gamma0 * (1.0 + 2.0**-n) for n in nus]
    E = [E0 * (2.0 - 2.0**-n) for n in nus]

    p_exp = 10.0 * (3.0 + tau + 1.0)
    S = sum(1.0 / (3.0 * kappa ** (mu + 1)) for mu in range(product_terms))
    logC_E = sum(
        4.0 * math.log(E[min(mu, nu_max + 1)] / E0) / (3.0 * kappa ** (mu + 1))
        for mu in range(product_terms)
    )
    target = (
        math.log(b_margin)
        + math.log(delta0 / 80.0) / (1.0 - beta_prime)
        - logC_E
        - math.log(eps0)
    ) / S
    B0 = math.exp(target)
    cap = 0.25 * (0.1 / eps0 ** (1.0 - beta_prime)) ** 2
    B0 = min(B0, cap)
    B_const = B0 / (E0**4 * varrho[0] ** -p_exp)
    B = [B_const * E[n] ** 4 * varrho[0] ** -p_exp for n in nus]

    eps = [eps0]
    eta = []
    s = [s0]
    for n in nus[:-1]:
        e = (eps[n] ** (1.0 - beta_prime) * B[n]) ** (1.0 / 3.0)
        eta.append(e)
        eps.append(e * eps[n])
        s.append(e * s[n])

    # the step-zero cutoff is held below the mode budget so that the
    # high-mode branch is genuinely exercised; afterwards the boundary
    # grows with the schedule and swallows the whole truncated lattice
    K, EK = [], []
    for n in nus[:-1]:
        k_formula = max(4, math.ceil(abs(math.log(eps[n])) / varrho[n]))
        if n == 0:
            k_room = max(1, math.floor((n_max - 1) / E[n]))
            kv = min(k_formula, k_step_cap, k_room)
        else:
            kv = k_formula
        K.append(kv)
        EK.append(math.ceil(E[n] * kv))

    drift = [B[n] ** 0.5 * eps[n] ** (1.0 - beta_prime / 5.0) for n in nus[:-1]]

    gates = {}
    rhs = (delta0 / 80.0) ** (1.0 / (1.0 - beta_prime)) * math.exp(
        -S * math.log(B0) - logC_E
    )
    gates["eps0_smallness"] = (eps0 <= rhs, f"eps0={eps0:.3e} <= {rhs:.3e}")
    gates["forcing_width"] = (
        E0 * rho_bar > 2.0 * varrho[0],
        f"E0*rho_bar={E0 * rho_bar:.3f} > 2*varrho0={2 * varrho[0]:.3f}",
    )
    gates["delta_gamma"] = (
        3200.0 * E0**2 * delta0 < beta_prime * gamma0,
        f"3200 E0^2 delta0={3200 * E0 ** 2 * delta0:.3e} < beta' gamma0={beta_prime * gamma0:.3e}",
    )
    gates["delta_gamma_32"] = (
        delta0 * gamma0 < 1.0 / 320.0,
        f"delta0*gamma0={delta0 * gamma0:.3e} well below 1/32",
    )
    gates["b_cap"] = (
        B0**0.5 * eps0 ** (1.0 - beta_prime) <= 0.1,
        f"B0^1/2 eps0^(1-beta')={B0 ** 0.5 * eps0 ** (1 - beta_prime):.3e} <= 0.1",
    )
    for name, (ok, detail) in gates.items():
        if not ok:
            raise GateViolation(name, detail)

    return Schedule(
        eps0=eps0,
        r0=r0,
        s0=s0,
        rho0=rho0,
        gamma0=gamma0,
        E0=E0,
        beta_prime=beta_prime,
        tau=tau,
        delta0=delta0,
        nu_max=nu_max,
        kappa=kappa,
        B_const=B_const,
        r=r,
        varrho=varrho,
        rho=rho,
        gamma=gamma,
        E=E,
        B=B,
        eps=eps,
        eta=eta,
        K=K,
        EK=EK,
        s=s,
        drift=drift,
        gates={k: v[1] for k, v in gates.items()},
    )


def measured_E0(cfg: ModelConfig) -> float:
    """sup over the parameter box of max_j |omega_j| + |d omega_j / d sigma|_1."""
    best = 0.0
    for lo, hi in cfg.omega_box:
        best = max(best, abs(lo) + 1.0, abs(hi) + 1.0)
    for j, site in enumerate(cfg.tangential):
        lo, hi = cfg.xi_box[j]
        for xi in (lo, hi):
            lam = math.sqrt(site * site + xi)
            best = max(best, lam + 0.5 / lam)
    return best


# ------------------------------------------------------------------ the run


@dataclass
class SampleHistory:
    sample: SigmaPoint
    status: str  # converged | excluded | halted | failed
    detail: str
    reports: list
    assumptions: object = None
    final_state: StepState | None = None

    def eps_trajectory(self):
        out = [(r.eps_in, r.eps_out) for r in self.reports]
        return out


@dataclass
class RunHistory:
    schedule: Schedule
    samples: list  # SampleHistory

    def contraction_fit(self, skip_first: bool = True):
        """Least-squares exponent of ln eps_out against ln eps_in over all
        accepted steps of all samples.  The pre-schedule initial step may
        be excluded (its contraction law precedes the general row)."""
        xs, ys = [], []
        for h in self.samples:
            for rep in self.reports_accepted(h):
                if skip_first and rep.nu == 0:
                    continue
                xs.append(math.log(rep.eps_in))
                ys.append(math.log(rep.eps_out))
        if len(xs) < 2:
            return math.nan, len(xs)
        slope = np.polyfit(xs, ys, 1)[0]
        return float(slope), len(xs)

    @staticmethod
    def reports_accepted(h: SampleHistory):
        return [r for r in h.reports if r.accepted]


def draw_samples(cfg: ModelConfig, count: int, seed: int):
    rng = np.random.default_rng(seed)
    box = cfg.box()
    out = []
    for _ in range(count):
        vals = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random(box.shape[0])
        out.append(SigmaPoint.make(vals))
    return out


def run(
    cfg: ModelConfig,
    schedule: Schedule,
    samples,
    nu_max: int | None = None,
    progress=None,
) -> RunHistory:
    nu_max = schedule.nu_max if nu_max is None else nu_max
    histories = []
    for sample in samples:
        dom0 = schedule.domain(0, cfg.a)
        budget = cfg.budget(dom0)
        N, P1, P2, P3, build_rep = build_hamiltonian(cfg, sample, budget)
        assum = verify_assumptions(
            N,
            P1,
            P2,
            P3,
            dom0,
            cfg,
            eps_bound=schedule.eps0,
            ek_boundary=schedule.EK[0],
            tau=schedule.tau,
            delta0=schedule.delta0,
            gamma0=schedule.gamma0,
            gamma=schedule.gamma[0],
            build_report=build_rep,
        )
        if not assum.all_ok:
            histories.append(
                SampleHistory(sample, "failed", "initial assumptions failed", [], assum)
            )
            continue
        state = StepState(cfg, sample, N, P1, P2, P3, budget)
        reports = []
        status, detail = "converged", ""
        for nu in range(nu_max):
            par = schedule.params(nu, cfg.a)
            try:
                state, rep = run_step(state, par)
                reports.append(rep)
                if progress:
                    progress(sample, rep)
            except DivisorViolation as exc:
                status, detail = "excluded", str(exc)
                break
            except StepRejected as exc:
                if exc.report is not None:
                    reports.append(exc.report)
                status, detail = "halted", exc.reason
                break
            except NeumannDivergence as exc:
                status, detail = "halted", str(exc)
                break
        histories.append(
            SampleHistory(sample, status, detail, reports, assum, state)
        )
    return RunHistory(schedule, histories)


# ----------------------------------------------------------- torus extraction


@dataclass
class TorusData:
    omega_star: np.ndarray
    i_star: float
    tangential: tuple
    n_max: int
    a: float
    rho: float
    s_final: float
    eps_final: float
    coord_series: dict  # name -> list of (k tuple, complex)
    c_star: complex
    f_star: list  # (k tuple, complex)
    blocks: dict  # |n| -> (sites, value matrix as nested lists)
    levels: int
    dpsi_bound: float
    psi_increments: list

    def eval_coord(self, name: str, theta: np.ndarray) -> complex:
        total = 0.0 + 0.0j
        for k, c in self.coord_series[name]:
            total += c * np.exp(1j * float(np.dot(k, theta)))
        return total

    def lattice_point(self, theta: np.ndarray) -> dict:
        """Complex normal coordinates for every lattice mode at angle theta."""
        out = {}
        for j, site in enumerate(self.tangential):
            Ij = self.eval_coord(f"I_{j}", theta)
            Aj = self.eval_coord(f"A_{j}", theta)
            out[site] = np.sqrt(self.i_star + Ij) * Aj
        for name in self.coord_series:
            if name.startswith("w_"):
                out[int(name[2:])] = self.eval_coord(name, theta)
        return out

    def to_json(self) -> dict:
        def ser(series):
            return [[list(map(int, k)), c.real, c.imag] for k, c in series]

        return {
            "omega_star": [float(x) for x in self.omega_star],
            "i_star": self.i_star,
            "tangential": list(self.tangential),
            "n_max": self.n_max,
            "a": self.a,
            "rho": self.rho,
            "s_final": self.s_final,
            "eps_final": self.eps_final,
            "c_star": [self.c_star.real, self.c_star.imag],
            "f_star": ser(self.f_star),
            "coords": {k: ser(v) for k, v in self.coord_series.items()},
            "blocks": {
                str(n): {
                    "sites": sites,
                    "matrix": [[[z.real, z.imag] for z in row] for row in mat],
                }
                for n, (sites, mat) in self.blocks.items()
            },
            "levels": self.levels,
            "dpsi_bound": self.dpsi_bound,
            "psi_increments": self.psi_increments,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TorusData":
        def deser(rows):
            return [(tuple(k), complex(re, im)) for k, re, im in rows]

        return cls(
            omega_star=np.array(data["omega_star"]),
            i_star=data["i_star"],
            tangential=tuple(data["tangential"]),
            n_max=data["n_max"],
            a=data["a"],
            rho=data["rho"],
            s_final=data["s_final"],
            eps_final=data["eps_final"],
            coord_series={k: deser(v) for k, v in data["coords"].items()},
            c_star=complex(*data["c_star"]),
            f_star=deser(data["f_star"]),
            blocks={
                int(n): (
                    blk["sites"],
                    [[complex(re, im) for re, im in row] for row in blk["matrix"]],
                )
                for n, blk in data["blocks"].items()
            },
            levels=data["levels"],
            dpsi_bound=data["dpsi_bound"],
            psi_increments=data["psi_increments"],
        )


def _pullback(series: TFSeries, F: TFSeries, tol: float, max_orders: int = 12) -> TFSeries:
    """exp(ad_F) applied to a coordinate function, adaptively truncated."""
    out = series
    term = series
    drop = tol * 1e-9
    for m in range(1, max_orders + 1):
        term = term.poisson(F).scaled(1.0 / m).compress(drop)
        out = out + term
        if term.series_norm() < tol:
            break
    return out


def _theta_restrict(series: TFSeries):
    """Fourier rows of the restriction to the zero section I = w = 0."""
    bud = series.budget
    tb = bud.tb
    rest = series.keys[:, tb:]
    mask = (rest == 0).all(axis=1)
    out = []
    for i in np.nonzero(mask)[0]:
        out.append(
            (tuple(int(x) for x in series.keys[i, :tb]), complex(series.coefs[i, 0]))
        )
    return out


def extract_torus(
    history: SampleHistory,
    schedule: Schedule,
    cfg: ModelConfig,
    levels: int | None = None,
    tol: float | None = None,
    dpsi_samples: int = 4,
    seed: int = 7,
) -> TorusData:
    """Compose the step transformations on the coordinate functions and
    restrict to the zero section: the embedded torus, its frequencies and
    the reduced constant-coefficient normal dynamics."""
    state = history.final_state
    if state is None or not history.reports:
        raise ValueError("need at least one accepted step to extract a torus")
    gens = state.generators if levels is None else state.generators[:levels]
    if levels is None:
        levels = len(gens)
    eps_final = history.reports[min(levels, len(history.reports)) - 1].eps_out
    tol = tol if tol is not None else max(1e-3 * eps_final, 1e-30)

    bud0 = cfg.budget(schedule.domain(0, cfg.a))
    coords = {}
    for j in range(cfg.b):
        l = [0] * cfg.b
        l[j] = 1
        coords[f"I_{j}"] = TFSeries.from_terms(bud0, [(MonoKey.make(bud0, l=tuple(l)), 1.0)])
        k = [0] * bud0.tb
        k[cfg.nu + j] = 1
        coords[f"A_{j}"] = TFSeries.from_terms(bud0, [(MonoKey.make(bud0, k=tuple(k)), 1.0)])
    for n in bud0.sites:
        n = int(n)
        coords[f"w_{n}"] = TFSeries.from_terms(
            bud0, [(MonoKey.make(bud0, alpha={n: 1}), 1.0)]
        )

    prefix_rows = []  # per level, theta-restriction of every coordinate
    current = dict(coords)
    prefix_rows.append({k: _theta_restrict(v) for k, v in current.items()})
    for F, bud in gens:
        nxt = {}
        for name, ser in current.items():
            ser_h = ser.rehome(bud) if ser.budget != bud else ser
            nxt[name] = _pullback(ser_h, F, tol)
        current = nxt
        prefix_rows.append({k: _theta_restrict(v) for k, v in current.items()})

    N = state.N
    omega_star = N.omega_values()
    f_star = _theta_restrict(N.f_theta)
    blocks = {
        n: (sites, [[complex(mat[i, j, 0]) for j in range(len(sites))] for i in range(len(sites))])
        for n, (sites, mat) in N.blocks.items()
    }

    # weighted Jacobian bound and successive increments at angle samples
    rng = np.random.default_rng(seed)
    thetas = [rng.random(bud0.tb) * 2 * np.pi for _ in range(dpsi_samples)]
    dom0 = bud0.dom

    def coord_weight(name):
        if name.startswith("w_"):
            n = abs(int(name[2:]))
            return n**dom0.a * math.exp(n * dom0.rho) / dom0.s
        if name.startswith("I_"):
            return 1.0 / dom0.s**2
        return 1.0

    def eval_rows(rows, theta):
        return sum(c * np.exp(1j * float(np.dot(k, theta))) for k, c in rows)

    dpsi = 0.0
    h = 1e-6
    final_rows = prefix_rows[-1]
    for theta in thetas:
        for jdir in range(bud0.tb):
            e = np.zeros(bud0.tb)
            e[jdir] = h
            col = 0.0
            for name, rows in final_rows.items():
                der = (eval_rows(rows, theta + e) - eval_rows(rows, theta - e)) / (2 * h)
                col += abs(der) * coord_weight(name)
            # the flat angle block contributes its identity column
            dpsi = max(dpsi, col + 1.0 if jdir < cfg.nu else col)

    increments = []
    for lv in range(1, len(prefix_rows)):
        worst = 0.0
        for theta in thetas:
            tot = 0.0
            for name in final_rows:
                d = eval_rows(prefix_rows[lv][name], theta) - eval_rows(
                    prefix_rows[lv - 1][name], theta
                )
                tot += abs(d) * coord_weight(name)
            worst = max(worst, tot)
        increments.append(worst)

    i_star = cfg.i_star_factor * schedule.s0**2
    return TorusData(
        omega_star=omega_star,
        i_star=i_star,
        tangential=tuple(cfg.tangential),
        n_max=cfg.n_max,
        a=cfg.a,
        rho=schedule.rho[levels],
        s_final=schedule.s[levels],
        eps_final=eps_final,
        coord_series=final_rows,
        c_star=complex(N.c.value),
        f_star=f_star,
        blocks=blocks,
        levels=levels,
        dpsi_bound=dpsi,
        psi_increments=increments,
    )
