"""Convex layer-allocation solvers and codeword planning.

Two allocation criteria over the erasure-broadcast capacity face
sum_l R_l / C_l <= 1:

- weighted total distortion: minimize sum_l w_l * Dbar_l for given
  bandwidth expansion b,
- min-max distortion penalty: minimize the worst ratio of a user's
  distortion to its individual rate-distortion bound at the same b.

Both are solved as small dense convex programs over the channel rates R_l
and the logs t_{i,l} = ln D_{i,l} of the per-component distortions, where
every constraint is linear and the only curvature sits in exp(t) terms.  A
self-contained log-barrier interior-point method (Newton inner loop,
barrier parameter x10 per stage) drives the duality gap below 1e-9, which
is far inside every tolerance used downstream.

The second half of the module turns a solved allocation into a concrete
transmission plan: how many bit-planes of each component every layer
carries, and how long each plane's channel codeword must be once the
rateless code's gap to capacity is budgeted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .rd_math import SourceSpec, ChannelSpec, distortion_of_rate
from .quantizer import QuantizerModel

__all__ = [
    "AllocationProblem",
    "AllocationSolution",
    "TransmissionPlan",
    "user_opt_distortion",
    "solve_mwtd",
    "solve_mmdp",
    "round_bitplanes",
    "plan_codewords",
    "default_overheads",
    "kkt_residual",
]

_LN2 = math.log(2.0)
_T_FLOOR = 80.0  # ln sigma^2 minus this bounds t from below; never active in practice
_GAP_REL = 1e-9


@dataclass(frozen=True)
class AllocationProblem:
    """One allocation instance: source, channel, bandwidth, optional weights."""

    spec: SourceSpec
    chan: ChannelSpec
    bandwidth: float
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth expansion factor must be positive")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if len(w) != self.chan.users:
                raise ValueError("need one weight per user")
            if any(x < 0 for x in w):
                raise ValueError("weights must be nonnegative")
            if not any(x > 0 for x in w):
                raise ValueError("at least one weight must be positive")
            object.__setattr__(self, "weights", w)


@dataclass
class AllocationSolution:
    """Solver output: channel rates per layer and the s x L distortion matrix."""

    problem: AllocationProblem
    criterion: str
    layer_rates: np.ndarray
    distortions: np.ndarray  # (s, L)
    objective: float
    kkt_residual: float = math.nan

    @property
    def layer_avg_distortions(self) -> np.ndarray:
        return self.distortions.mean(axis=0)


@dataclass
class TransmissionPlan:
    """Bit-plane ownership plus per-plane codeword lengths.

    bitplanes[i, l] is the cumulative number of planes of component i that
    user l consumes; layer l owns the planes between bitplanes[i, l-1] and
    bitplanes[i, l].  Codeword lengths and the realized bandwidth are
    filled in by plan_codewords.
    """

    bitplanes: np.ndarray  # (s, L) ints, cumulative, nondecreasing along l
    codeword_lengths: dict[tuple[int, int], int] = field(default_factory=dict)
    owner_layers: dict[tuple[int, int], int] = field(default_factory=dict)
    overheads: np.ndarray | None = None
    effective_bandwidth: float | None = None

    def codewords(self) -> list[tuple[int, int]]:
        """All (component, plane) pairs in transmission order."""
        s = self.bitplanes.shape[0]
        out = []
        for i in range(s):
            for j in range(1, int(self.bitplanes[i, -1]) + 1):
                out.append((i, j))
        return out


def user_opt_distortion(spec: SourceSpec, bandwidth: float, capacity: float) -> float:
    """A single user's rate-distortion bound at source rate b * C."""
    if bandwidth <= 0 or capacity <= 0:
        raise ValueError("bandwidth and capacity must be positive")
    return distortion_of_rate(spec, bandwidth * capacity).avg_distortion


# ---------------------------------------------------------------------------
# barrier machinery
# ---------------------------------------------------------------------------
#
# Variable layout: z = [R_1..R_L, t-block(layer 1), ..., t-block(layer L), (alpha)]
# with each t-block holding s entries, plus a trailing alpha for the min-max
# criterion.  All constraints are written g_i(z) <= 0.


class _Program:
    def __init__(self, problem: AllocationProblem, criterion: str):
        self.problem = problem
        self.criterion = criterion
        spec, chan = problem.spec, problem.chan
        self.s = spec.count
        self.L = chan.users
        self.b = problem.bandwidth
        self.caps = np.array(chan.capacities)
        self.lnvar = np.log(np.array(spec.variances))
        self.has_alpha = criterion == "mmdp"
        self.n = self.L + self.s * self.L + (1 if self.has_alpha else 0)
        if self.has_alpha:
            self.dopt_total = np.array([
                self.s * user_opt_distortion(spec, self.b, c) for c in self.caps
            ])
        if criterion == "mwtd":
            self.w = np.array(problem.weights, dtype=float)
        # constraint count: capacity, R>=0, t ceilings, t floors, rate couplings,
        # and for min-max one penalty row per layer
        self.m = 1 + self.L + 2 * self.s * self.L + self.L + (self.L if self.has_alpha else 0)

    # -- unpacking ---------------------------------------------------------
    def t_index(self, i: int, l: int) -> int:
        return self.L + l * self.s + i

    def unpack(self, z: np.ndarray):
        R = z[: self.L]
        t = z[self.L: self.L + self.s * self.L].reshape(self.L, self.s)  # [l, i]
        alpha = z[-1] if self.has_alpha else None
        return R, t, alpha

    # -- objective ---------------------------------------------------------
    def objective(self, z: np.ndarray):
        R, t, alpha = self.unpack(z)
        grad = np.zeros(self.n)
        hess = np.zeros((self.n, self.n))
        if self.has_alpha:
            grad[-1] = 1.0
            return float(alpha), grad, hess
        e = np.exp(t)  # (L, s)
        val = float(np.sum(self.w[:, None] * e) / self.s)
        g = (self.w[:, None] * e / self.s).ravel()
        grad[self.L: self.L + self.s * self.L] = g
        idx = np.arange(self.L, self.L + self.s * self.L)
        hess[idx, idx] = g
        return val, grad, hess

    # -- constraints -------------------------------------------------------
    def constraints(self, z: np.ndarray):
        """Values g (m,), Jacobian J (m, n), and curvature rows.

        curvature rows: list of (constraint index, diag indices, diag values)
        for the few constraints with nonzero Hessian.
        """
        R, t, alpha = self.unpack(z)
        s, L, n = self.s, self.L, self.n
        g = np.empty(self.m)
        J = np.zeros((self.m, n))
        curv = []
        r = 0
        # capacity face
        g[r] = float(np.sum(R / self.caps) - 1.0)
        J[r, :L] = 1.0 / self.caps
        r += 1
        # R_l >= 0
        for l in range(L):
            g[r] = -R[l]
            J[r, l] = -1.0
            r += 1
        # t ceilings and floors
        for l in range(L):
            base = L + l * s
            for i in range(s):
                g[r] = t[l, i] - self.lnvar[i]
                J[r, base + i] = 1.0
                r += 1
                g[r] = (self.lnvar[i] - _T_FLOOR) - t[l, i]
                J[r, base + i] = -1.0
                r += 1
        # rate couplings: sum_i (lnvar - t)/(2 s ln2) <= b * cumsum(R)
        coef = 1.0 / (2.0 * s * _LN2)
        for l in range(L):
            lhs = float(np.sum(self.lnvar - t[l]) * coef)
            g[r] = lhs - self.b * float(np.sum(R[: l + 1]))
            J[r, : l + 1] = -self.b
            base = L + l * s
            J[r, base: base + s] = -coef
            r += 1
        # min-max penalty rows: sum_i exp(t) <= alpha * s * Dopt_l
        if self.has_alpha:
            for l in range(L):
                e = np.exp(t[l])
                g[r] = float(np.sum(e)) - alpha * self.dopt_total[l]
                base = L + l * s
                J[r, base: base + s] = e
                J[r, -1] = -self.dopt_total[l]
                curv.append((r, np.arange(base, base + s), e))
                r += 1
        return g, J, curv

    # -- strictly feasible start -------------------------------------------
    def start(self) -> np.ndarray:
        z = np.zeros(self.n)
        R = self.caps / (2.0 * self.L)
        z[: self.L] = R
        budget = self.b * np.cumsum(R)
        for l in range(self.L):
            slack = min(1.0, _LN2 * float(budget[l]))
            base = self.L + l * self.s
            z[base: base + self.s] = self.lnvar - slack
        if self.has_alpha:
            worst = 0.0
            for l in range(self.L):
                base = self.L + l * self.s
                worst = max(worst, float(np.sum(np.exp(z[base: base + self.s]))) / self.dopt_total[l])
            z[-1] = 2.0 * worst
        return z


def _newton_stage(prog: _Program, z: np.ndarray, tau: float) -> np.ndarray:
    for _ in range(80):
        f, gf, Hf = prog.objective(z)
        g, J, curv = prog.constraints(z)
        if np.any(g >= 0):
            raise RuntimeError("barrier iterate left the feasible region")
        d1 = 1.0 / (-g)
        grad = tau * gf + J.T @ d1
        H = tau * Hf + (J * (d1 ** 2)[:, None]).T @ J
        for (row, idx, vals) in curv:
            H[idx, idx] += d1[row] * vals
        H[np.diag_indices_from(H)] += 1e-12 * max(1.0, float(np.trace(H)) / prog.n)
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, -grad, rcond=None)[0]
        decrement = float(-grad @ step)
        if decrement <= 2e-13:
            break
        # backtracking: stay strictly feasible, then Armijo
        val = tau * f - float(np.sum(np.log(-g)))
        stepsize = 1.0
        for _ in range(60):
            zn = z + stepsize * step
            gn, _, _ = prog.constraints(zn)
            if np.all(gn < 0):
                fn, _, _ = prog.objective(zn)
                valn = tau * fn - float(np.sum(np.log(-gn)))
                if valn <= val - 0.25 * stepsize * decrement:
                    break
            stepsize *= 0.5
        else:
            break
        z = z + stepsize * step
    return z


def _solve(prog: _Program) -> tuple[np.ndarray, np.ndarray, float]:
    z = prog.start()
    tau = 1.0
    for _ in range(40):
        z = _newton_stage(prog, z, tau)
        f, _, _ = prog.objective(z)
        gap = prog.m / tau
        if gap <= _GAP_REL * max(1.0, abs(f)):
            break
        tau *= 10.0
    g, _, _ = prog.constraints(z)
    duals = 1.0 / (tau * (-g))
    return z, duals, prog.m / tau


def _solution_from_z(prog: _Program, z: np.ndarray, criterion: str) -> AllocationSolution:
    R, t, alpha = prog.unpack(z)
    D = np.exp(t).T  # (s, L)
    if criterion == "mmdp":
        obj = float(alpha)
    else:
        obj = float(np.sum(prog.w * D.mean(axis=0)))
    sol = AllocationSolution(
        problem=prog.problem,
        criterion=criterion,
        layer_rates=R.copy(),
        distortions=D,
        objective=obj,
    )
    sol.kkt_residual = kkt_residual(sol, prog.problem, criterion)
    return sol


def solve_mwtd(problem: AllocationProblem) -> AllocationSolution:
    """Minimize the weighted sum of per-user average distortions."""
    if problem.weights is None:
        raise ValueError("weighted-distortion criterion needs weights")
    prog = _Program(problem, "mwtd")
    z, _, _ = _solve(prog)
    return _solution_from_z(prog, z, "mwtd")


def solve_mmdp(problem: AllocationProblem) -> AllocationSolution:
    """Minimize the worst per-user distortion penalty max_l Dbar_l / Dopt_l."""
    prog = _Program(problem, "mmdp")
    z, _, _ = _solve(prog)
    return _solution_from_z(prog, z, "mmdp")


def kkt_residual(solution: AllocationSolution, problem: AllocationProblem,
                 criterion: str) -> float:
    """Worst violation of the first-order optimality system at a solution.

    Dual variables are fitted by nonnegative least squares on the
    stationarity equations with complementary-slackness rows discouraging
    mass on inactive constraints; the residual is the max of stationarity,
    complementarity and primal-feasibility violations.
    """
    if criterion not in ("mwtd", "mmdp"):
        raise ValueError(f"no optimality system for criterion {criterion!r}")
    prog = _Program(problem, criterion)
    s, L = prog.s, prog.L
    z = np.empty(prog.n)
    z[:L] = solution.layer_rates
    with np.errstate(divide="ignore"):
        z[L: L + s * L] = np.log(solution.distortions.T).ravel()
    if prog.has_alpha:
        z[-1] = solution.objective
    _, gf, _ = prog.objective(z)
    g, J, _ = prog.constraints(z)
    A = np.vstack([J.T, np.diag(np.abs(g))])
    rhs = np.concatenate([-gf, np.zeros(prog.m)])
    lam, _ = nnls(A, rhs)
    stationarity = float(np.max(np.abs(gf + J.T @ lam)))
    complementarity = float(np.max(lam * np.abs(g)))
    primal = float(max(0.0, np.max(g)))
    return max(stationarity, complementarity, primal)


# ---------------------------------------------------------------------------
# bit-plane rounding and codeword planning
# ---------------------------------------------------------------------------

def _model_curve(qmodel: QuantizerModel) -> np.ndarray:
    """Model of the depth-p unit-variance distortion, p = 0..N."""
    r = qmodel.cumulative_rates
    return np.minimum(1.0, qmodel.gamma_fit * np.exp2(-2.0 * r))


def round_bitplanes(solution: AllocationSolution, qmodel: QuantizerModel,
                    mode: str = "nearest") -> TransmissionPlan:
    """Quantize the allocation's distortion targets onto whole bit-planes.

    For each component and layer, pick the prefix depth whose model
    distortion gamma_fit * sigma^2 * 2^(-2 r(p)) best matches the target:
    mode "nearest" minimizes the absolute mismatch (the default; unbiased,
    keeps the realized bandwidth close to the ideal one), mode "ceil" picks
    the shallowest depth whose model distortion is at or below the target
    (never worse than the target, at the price of up to one extra plane).
    Depths are capped at the quantizer depth and forced nondecreasing
    across layers; depth 0 (component skipped) is allowed.
    """
    if mode not in ("nearest", "ceil"):
        raise ValueError(f"unknown rounding mode {mode!r}")
    curve = _model_curve(qmodel)
    variances = np.array(solution.problem.spec.variances)
    targets = solution.distortions / variances[:, None]
    s, L = targets.shape
    planes = np.zeros((s, L), dtype=int)
    for i in range(s):
        for l in range(L):
            t = targets[i, l]
            if mode == "ceil":
                hits = np.nonzero(curve <= t * (1.0 + 1e-12))[0]
                planes[i, l] = int(hits[0]) if hits.size else qmodel.depth
            else:
                planes[i, l] = int(np.argmin(np.abs(curve - t)))
    planes = np.maximum.accumulate(planes, axis=1)
    return TransmissionPlan(bitplanes=planes)


def default_overheads(chan: ChannelSpec, fraction: float = 0.04) -> np.ndarray:
    """Per-layer gap to capacity as a fixed fraction of each capacity."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("overhead fraction must be in [0, 1)")
    return fraction * np.array(chan.capacities)


def plan_codewords(plan: TransmissionPlan, qmodel: QuantizerModel,
                   spec: SourceSpec, chan: ChannelSpec,
                   overheads: np.ndarray) -> TransmissionPlan:
    """Fill in codeword lengths and the realized bandwidth expansion.

    Layer l owns the planes between the cumulative counts of layers l-1 and
    l; its codewords are sized k * H_j / (C_l - delta_l), so after the
    erasure rate C_l the decoder still collects the plane's entropy plus
    the code's gap-to-capacity margin.
    """
    caps = np.array(chan.capacities)
    overheads = np.asarray(overheads, dtype=float)
    if overheads.shape != caps.shape:
        raise ValueError("need one overhead per layer")
    if np.any(overheads < 0) or np.any(overheads >= caps):
        raise ValueError("overheads must satisfy 0 <= delta_l < C_l")
    planes = plan.bitplanes
    s, L = planes.shape
    if np.any(planes > qmodel.depth):
        raise ValueError("plan exceeds quantizer depth")
    H = qmodel.plane_entropies
    k = spec.block_length
    lengths: dict[tuple[int, int], int] = {}
    owners: dict[tuple[int, int], int] = {}
    total = 0
    for i in range(s):
        prev = 0
        for l in range(L):
            for j in range(prev + 1, int(planes[i, l]) + 1):
                n = math.ceil(k * float(H[j - 1]) / (caps[l] - overheads[l]))
                lengths[(i, j)] = n
                owners[(i, j)] = l
                total += n
            prev = int(planes[i, l])
    return TransmissionPlan(
        bitplanes=planes.copy(),
        codeword_lengths=lengths,
        owner_layers=owners,
        overheads=overheads.copy(),
        effective_bandwidth=total / (s * k),
    )
