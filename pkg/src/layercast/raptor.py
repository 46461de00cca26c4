"""Rateless linear coding over GF(2) with prior-aware belief propagation.

Encoding is systematic in the sense that the source bits themselves are
never transmitted: every output symbol is the XOR of a random subset of
the intermediate block (source bits plus, optionally, the parity bits of a
high-rate precode), with subset sizes drawn from a fixed output degree
distribution.  Any number of output symbols can be produced, so the code
rate is set purely by how many symbols the plan assigns to a codeword.

The precode is an accumulator-structured low-density check set: check c
enforces p_c = p_{c-1} XOR (a sparse subset of source bits), which makes
encoding a running XOR and gives the decoder extra zero-syndrome
constraints to finish off the residual erasures that belief propagation
on the output graph alone tends to leave behind.

Decoding is flooding sum-product over the bipartite graph of received
(non-erased) output symbols plus precode checks.  Source nodes carry
prior log-likelihood ratios from the quantizer's conditional bit-plane
statistics; on an erasure channel with uniform priors the recursion
degenerates to exact peeling, while informative priors turn it into a
genuine soft decoder.  Messages are damped and clipped for stability with
strongly saturated priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .quantizer import (QuantizerModel, conditional_plane_prior,
                        conditional_plane_prior_soft)

__all__ = [
    "DegreeDistribution",
    "DEFAULT_OUTPUT_DISTRIBUTION",
    "PrecodeConfig",
    "default_precode",
    "CodeGraph",
    "DecodeResult",
    "DecodeStage",
    "sample_graph",
    "lt_subgraph",
    "encode",
    "bp_decode",
    "multistage_decode",
]

LLR_CLIP = 30.0
UNRESOLVED_TOL = 1e-3


@dataclass(frozen=True)
class DegreeDistribution:
    """Output-node degree law: distinct degrees with probabilities summing to 1."""

    degrees: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.degrees) != len(self.probs) or not self.degrees:
            raise ValueError("degrees and probabilities must align and be nonempty")
        if len(set(self.degrees)) != len(self.degrees):
            raise ValueError("degrees must be distinct")
        if any(d < 1 for d in self.degrees):
            raise ValueError("degrees must be positive")
        total = float(sum(self.probs))
        if not 0.9 < total < 1.1:
            raise ValueError("probabilities are not close to a distribution")
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        object.__setattr__(self, "probs", tuple(float(p) / total for p in self.probs))

    @property
    def mean_degree(self) -> float:
        return float(sum(d * p for d, p in zip(self.degrees, self.probs)))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(np.array(self.degrees), size=size, p=np.array(self.probs))


# Standard heavy-tailed output distribution for rateless erasure coding;
# printed 3-decimal coefficients sum to 1.001, normalized here.
DEFAULT_OUTPUT_DISTRIBUTION = DegreeDistribution(
    degrees=(1, 2, 3, 4, 5, 8, 9, 19, 65, 66),
    probs=(0.008, 0.494, 0.166, 0.073, 0.083, 0.056, 0.037, 0.056, 0.025, 0.003),
)


@dataclass(frozen=True)
class PrecodeConfig:
    """Accumulator LDPC check set: each source bit joins bit_degree checks,
    each check mixes about check_degree source bits.

    The default shape is deliberately very high rate (about 1% parity
    variables): the check set only has to mop up the percent-scale residue
    the output code's peeling leaves behind, while every parity variable
    it adds dilutes the received output symbols and pushes the peeling
    threshold up.  Denser check sets measurably hurt at the operating
    points this package targets.
    """

    bit_degree: int = 3
    check_degree: int = 300

    def check_count(self, k: int) -> int:
        return max(1, math.ceil(k * self.bit_degree / self.check_degree))


def default_precode(plane_entropy: float) -> PrecodeConfig | None:
    """Precode policy for a plane with the given conditional entropy.

    Always on: a fraction of source bits inevitably ends up in no received
    output symbol (Poisson coverage holes), and only the check set can pin
    those down, whatever the plane's prior strength.  The argument is kept
    so callers can plug in entropy-dependent policies.
    """
    return PrecodeConfig()


@dataclass(frozen=True)
class CodeGraph:
    """Sampled code structure for one codeword.

    Output (LT) node rows index into the intermediate block of
    k + n_precode variables; precode rows list each check's variables
    including its accumulator parity positions.  Everything is a pure
    function of (k, n_parity, seed, distribution, precode config).
    """

    k: int
    n_parity: int
    seed: int
    lt_indptr: np.ndarray = field(repr=False)
    lt_indices: np.ndarray = field(repr=False)
    pre_indptr: np.ndarray = field(repr=False)
    pre_indices: np.ndarray = field(repr=False)
    n_precode: int = 0

    @property
    def k_total(self) -> int:
        return self.k + self.n_precode

    def lt_row(self, i: int) -> np.ndarray:
        return self.lt_indices[self.lt_indptr[i]: self.lt_indptr[i + 1]]


@dataclass(frozen=True)
class DecodeResult:
    """Per-source-bit posteriors and their hard thresholding."""

    posterior_p1: np.ndarray
    hard_bits: np.ndarray
    converged: bool
    iterations: int
    unresolved: int


@dataclass(frozen=True)
class DecodeStage:
    """One codeword of a multistage decode: (component, plane) plus its data."""

    graph: CodeGraph
    received: np.ndarray
    component: int
    plane: int


def _rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def sample_graph(k: int, n: int, seed: int,
                 dist: DegreeDistribution = DEFAULT_OUTPUT_DISTRIBUTION,
                 precode: PrecodeConfig | None = None) -> CodeGraph:
    """Draw the code graph: i.i.d. output degrees, uniform distinct neighbors."""
    if k < 1 or n < 0:
        raise ValueError("need k >= 1 source bits and n >= 0 outputs")
    rng = _rng_for(seed)

    if precode is not None:
        m = precode.check_count(k)
        stacked = np.concatenate([rng.permutation(k) for _ in range(precode.bit_degree)])
        splits = np.array_split(stacked, m)
        rows = []
        for c, chunk in enumerate(splits):
            vals, counts = np.unique(chunk, return_counts=True)
            keep = vals[counts % 2 == 1]  # duplicate pairs cancel over GF(2)
            row = [keep]
            if c > 0:
                row.append(np.array([k + c - 1]))
            row.append(np.array([k + c]))
            rows.append(np.concatenate(row))
        pre_indptr = np.zeros(m + 1, dtype=np.int64)
        pre_indptr[1:] = np.cumsum([r.size for r in rows])
        pre_indices = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
        n_precode = m
    else:
        pre_indptr = np.zeros(1, dtype=np.int64)
        pre_indices = np.empty(0, dtype=np.int64)
        n_precode = 0

    kt = k + n_precode
    degrees = np.minimum(dist.sample(rng, n), kt) if n else np.empty(0, dtype=int)
    neigh = []
    for d in degrees:
        d = int(d)
        u = np.unique(rng.integers(0, kt, size=d))
        while u.size < d:
            extra = rng.integers(0, kt, size=d - u.size)
            u = np.unique(np.concatenate([u, extra]))
        neigh.append(u)
    lt_indptr = np.zeros(n + 1, dtype=np.int64)
    if n:
        lt_indptr[1:] = np.cumsum(degrees)
    lt_indices = np.concatenate(neigh) if neigh else np.empty(0, dtype=np.int64)

    return CodeGraph(k=k, n_parity=int(n), seed=int(seed),
                     lt_indptr=lt_indptr, lt_indices=lt_indices,
                     pre_indptr=pre_indptr, pre_indices=pre_indices,
                     n_precode=n_precode)


def lt_subgraph(graph: CodeGraph, keep: np.ndarray) -> CodeGraph:
    """Restriction of the graph to a subset of its output nodes."""
    keep = np.asarray(keep, dtype=np.int64)
    rows = [graph.lt_row(int(i)) for i in keep]
    indptr = np.zeros(keep.size + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([r.size for r in rows])
    indices = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    return CodeGraph(k=graph.k, n_parity=keep.size, seed=graph.seed,
                     lt_indptr=indptr, lt_indices=indices,
                     pre_indptr=graph.pre_indptr, pre_indices=graph.pre_indices,
                     n_precode=graph.n_precode)


def _intermediate(graph: CodeGraph, source_bits: np.ndarray) -> np.ndarray:
    inter = np.zeros(graph.k_total, dtype=np.uint8)
    inter[: graph.k] = source_bits
    if graph.n_precode:
        vals = inter[graph.pre_indices]
        sx = np.bitwise_xor.reduceat(vals, graph.pre_indptr[:-1])
        inter[graph.k:] = np.bitwise_xor.accumulate(sx)
    return inter


def encode(graph: CodeGraph, source_bits: np.ndarray) -> np.ndarray:
    """XOR each output node's neighborhood; returns the n parity bits."""
    source_bits = np.asarray(source_bits, dtype=np.uint8)
    if source_bits.shape != (graph.k,):
        raise ValueError(f"expected {graph.k} source bits, got shape {source_bits.shape}")
    inter = _intermediate(graph, source_bits)
    if graph.n_parity == 0:
        return np.empty(0, dtype=np.uint8)
    return np.bitwise_xor.reduceat(inter[graph.lt_indices], graph.lt_indptr[:-1])


def _check_to_var(msg_vc: np.ndarray, edge_check: np.ndarray, indptr: np.ndarray,
                  check_sign: np.ndarray) -> np.ndarray:
    """Sum-product check update, log-magnitude domain, zero-safe."""
    t = np.tanh(0.5 * msg_vc)
    at = np.abs(t)
    zero = at == 0.0
    with np.errstate(divide="ignore"):
        logt = np.where(zero, 0.0, np.log(np.where(zero, 1.0, at)))
    neg = (t < 0.0).astype(np.int64)
    sum_log = np.add.reduceat(logt, indptr[:-1])
    sum_zero = np.add.reduceat(zero.astype(np.int64), indptr[:-1])
    sum_neg = np.add.reduceat(neg, indptr[:-1])
    ex_log = sum_log[edge_check] - logt
    ex_zero = sum_zero[edge_check] - zero
    ex_neg = sum_neg[edge_check] - neg
    sign = check_sign[edge_check] * np.where(ex_neg % 2 == 1, -1.0, 1.0)
    out = np.zeros_like(msg_vc)
    live = ex_zero == 0
    L = ex_log[live]  # log prod |tanh|, <= 0
    with np.errstate(divide="ignore", over="ignore"):
        mag = np.log1p(np.exp(L)) - np.log(np.maximum(-np.expm1(L), 1e-300))
    out[live] = np.clip(mag, 0.0, LLR_CLIP)
    return out * sign


def bp_decode(graph: CodeGraph, received: np.ndarray, priors_p1: np.ndarray,
              max_iters: int = 200, damping: float = 0.5) -> DecodeResult:
    """Belief propagation over the received symbols and precode checks.

    received holds one symbol per output node, -1 marking an erasure;
    erased rows are dropped before message passing (on an erasure channel
    they carry no evidence).  priors_p1 gives P(bit = 1) per source bit.
    Convergence means the posterior LLRs moved less than 1e-6; running out
    of iterations is reported through the flag, never raised.
    """
    received = np.asarray(received)
    if received.shape != (graph.n_parity,):
        raise ValueError("received length does not match the graph")
    priors_p1 = np.asarray(priors_p1, dtype=float)
    if priors_p1.shape != (graph.k,):
        raise ValueError("need one prior per source bit")
    if np.any(priors_p1 < 0.0) or np.any(priors_p1 > 1.0):
        raise ValueError("priors must lie in [0, 1]")

    kt = graph.k_total
    with np.errstate(divide="ignore"):
        lam0 = np.zeros(kt)
        lam0[: graph.k] = np.clip(
            np.log(np.maximum(1.0 - priors_p1, 1e-300))
            - np.log(np.maximum(priors_p1, 1e-300)),
            -LLR_CLIP, LLR_CLIP)

    kept = np.nonzero(received >= 0)[0]
    rows = [graph.lt_row(int(i)) for i in kept]
    values = [int(received[i]) for i in kept]
    nchk = len(rows) + graph.n_precode
    if nchk == 0:
        p1 = 1.0 / (1.0 + np.exp(lam0[: graph.k]))
        hard = (p1 > 0.5).astype(np.uint8)
        unresolved = int(np.count_nonzero((p1 > UNRESOLVED_TOL) & (p1 < 1.0 - UNRESOLVED_TOL)))
        return DecodeResult(posterior_p1=p1, hard_bits=hard, converged=True,
                            iterations=0, unresolved=unresolved)

    if graph.n_precode:
        pre_rows = [graph.pre_indices[graph.pre_indptr[c]: graph.pre_indptr[c + 1]]
                    for c in range(graph.n_precode)]
        rows += pre_rows
        values += [0] * graph.n_precode
    indptr = np.zeros(nchk + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([r.size for r in rows])
    edge_var = np.concatenate(rows)
    edge_check = np.repeat(np.arange(nchk), np.diff(indptr))
    check_sign = 1.0 - 2.0 * np.asarray(values, dtype=float)

    msg_vc = lam0[edge_var].copy()
    msg_cv = np.zeros_like(msg_vc)
    post = lam0.copy()
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        iterations = it
        msg_cv = _check_to_var(msg_vc, edge_check, indptr, check_sign)
        acc = np.bincount(edge_var, weights=msg_cv, minlength=kt)
        new_post = lam0 + acc
        fresh = new_post[edge_var] - msg_cv
        msg_vc = np.clip(damping * msg_vc + (1.0 - damping) * fresh,
                         -LLR_CLIP, LLR_CLIP)
        delta = float(np.max(np.abs(new_post - post))) if kt else 0.0
        post = new_post
        if delta < 1e-6:
            converged = True
            break

    src = np.clip(post[: graph.k], -500.0, 500.0)
    p1 = 1.0 / (1.0 + np.exp(src))
    hard = (p1 > 0.5).astype(np.uint8)
    unresolved = int(np.count_nonzero((p1 > UNRESOLVED_TOL) & (p1 < 1.0 - UNRESOLVED_TOL)))
    return DecodeResult(posterior_p1=p1, hard_bits=hard, converged=converged,
                        iterations=iterations, unresolved=unresolved)


def multistage_decode(stages: list[DecodeStage], qmodel: QuantizerModel,
                      max_iters: int = 200, damping: float = 0.5,
                      soft_priors: bool = False) -> list[DecodeResult]:
    """Decode a component's planes in significance order, conditioning each
    stage's priors on the outcome of the planes before it.

    Stages must arrive ordered by component with plane numbers ascending
    from 1 within each component.  By default each stage conditions on the
    hard decisions of the earlier planes; with soft_priors the earlier
    planes' posterior marginals are carried instead, which degrades more
    gracefully when an earlier stage only partially resolves (a failed
    stage then widens downstream priors rather than poisoning them with
    confident wrong bits).  A failed stage still yields posteriors (near
    1/2 where unresolved) and reconstruction absorbs the uncertainty
    through the soft posteriors either way.
    """
    results: list[DecodeResult] = []
    prefixes: dict[int, np.ndarray] = {}
    expected: dict[int, int] = {}
    for stage in stages:
        comp = stage.component
        nxt = expected.get(comp, 1)
        if stage.plane != nxt:
            raise ValueError(
                f"component {comp}: got plane {stage.plane}, expected {nxt}")
        expected[comp] = nxt + 1
        k = stage.graph.k
        if stage.plane == 1:
            priors = np.full(k, 0.5)
        elif soft_priors:
            priors = conditional_plane_prior_soft(qmodel, stage.plane, prefixes[comp])
        else:
            priors = conditional_plane_prior(qmodel, stage.plane, prefixes[comp])
        res = bp_decode(stage.graph, stage.received, priors,
                        max_iters=max_iters, damping=damping)
        results.append(res)
        row = (res.posterior_p1 if soft_priors else res.hard_bits)[None, :]
        prefixes[comp] = row if stage.plane == 1 else np.vstack([prefixes[comp], row])
    return results
