"""End-to-end experiments: allocate, quantize, encode, erase, decode, measure.

run_experiment wires the whole chain for one configuration: solve the
chosen allocation criterion, round the distortion targets onto bit-planes,
size the codewords, then Monte Carlo over source blocks and channel
erasures.  Every random draw is keyed off the master seed by
(domain, trial, user, component, plane), so a report can be replayed
bit-exactly and trials can run in parallel without shared state.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .rd_math import SourceSpec, ChannelSpec, rate_of_distortion, min_bandwidth
from .allocator import (AllocationProblem, AllocationSolution, TransmissionPlan,
                        solve_mwtd, solve_mmdp, round_bitplanes, plan_codewords,
                        default_overheads)
from .quantizer import (QuantizerModel, build_quantizer, bitplanes,
                        quantizer_distortion, soft_reconstruct)
from .raptor import (CodeGraph, DecodeStage, sample_graph, encode,
                     multistage_decode, default_precode)
from .channel import transmit, derive_seed

__all__ = ["ExperimentConfig", "ExperimentReport", "run_experiment",
           "measure_distortion"]

_DOM_CODE = 0
_DOM_SOURCE = 1
_DOM_CHANNEL = 2

CRITERIA = ("mb", "mwtd", "mmdp")


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved description of one experiment."""

    source: SourceSpec
    channel: ChannelSpec
    criterion: str
    bandwidth: float | None = None
    weights: tuple[float, ...] | None = None
    target_distortions: tuple[float, ...] | None = None
    quantizer_depth: int = 10
    overhead_fraction: float = 0.04
    overheads: tuple[float, ...] | None = None
    trials: int = 20
    master_seed: int = 0
    jobs: int = 1
    max_iters: int = 200
    damping: float = 0.5
    rounding: str = "nearest"
    soft_priors: bool = False

    def __post_init__(self):
        crit = self.criterion.lower()
        object.__setattr__(self, "criterion", crit)
        if crit not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}, got {crit!r}")
        if crit == "mb":
            if self.target_distortions is None:
                raise ValueError("min-bandwidth needs target_distortions")
            if len(self.target_distortions) != self.channel.users:
                raise ValueError("need one target distortion per user")
        else:
            if self.bandwidth is None or self.bandwidth <= 0:
                raise ValueError(f"{crit} needs a positive bandwidth")
            if crit == "mwtd" and self.weights is None:
                raise ValueError("weighted-distortion needs weights")
        if self.trials < 1:
            raise ValueError("need at least one trial")
        if self.overheads is not None and len(self.overheads) != self.channel.users:
            raise ValueError("need one overhead per user")

    def to_dict(self) -> dict:
        return {
            "variances": list(self.source.variances),
            "block_length": self.source.block_length,
            "erasure_probs": list(self.channel.erasure_probs),
            "criterion": self.criterion,
            "bandwidth": self.bandwidth,
            "weights": list(self.weights) if self.weights is not None else None,
            "target_distortions": (list(self.target_distortions)
                                   if self.target_distortions is not None else None),
            "quantizer_depth": self.quantizer_depth,
            "overhead_fraction": self.overhead_fraction,
            "overheads": list(self.overheads) if self.overheads is not None else None,
            "trials": self.trials,
            "master_seed": self.master_seed,
            "jobs": self.jobs,
            "max_iters": self.max_iters,
            "damping": self.damping,
            "rounding": self.rounding,
            "soft_priors": self.soft_priors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            source=SourceSpec(tuple(d["variances"]), d["block_length"]),
            channel=ChannelSpec(tuple(d["erasure_probs"])),
            criterion=d["criterion"],
            bandwidth=d.get("bandwidth"),
            weights=tuple(d["weights"]) if d.get("weights") is not None else None,
            target_distortions=(tuple(d["target_distortions"])
                                if d.get("target_distortions") is not None else None),
            quantizer_depth=d.get("quantizer_depth", 10),
            overhead_fraction=d.get("overhead_fraction", 0.04),
            overheads=tuple(d["overheads"]) if d.get("overheads") is not None else None,
            trials=d.get("trials", 20),
            master_seed=d.get("master_seed", 0),
            jobs=d.get("jobs", 1),
            max_iters=d.get("max_iters", 200),
            damping=d.get("damping", 0.5),
            rounding=d.get("rounding", "nearest"),
            soft_priors=d.get("soft_priors", False),
        )


@dataclass
class ExperimentReport:
    """Everything needed to audit or replay one experiment."""

    config: dict
    layer_rates: list
    target_distortions: list          # s x L solver targets D*
    objective: float
    kkt_residual: float
    bitplanes: list                   # s x L cumulative plane counts
    codeword_lengths: dict            # "i:j" -> n
    owner_layers: dict                # "i:j" -> layer
    overheads: list
    effective_bandwidth: float
    quantizer_gamma: float
    plane_entropies: list
    predicted_distortions: list       # s x L exact quantizer MSE at plan depths
    trial_distortions: list           # trials x s x L measured
    mean_distortions: list            # s x L
    stderr_distortions: list          # s x L
    decode_failures: dict             # "layer:i:j" -> failed trials
    decode_attempts: int              # trials
    graph_seeds: dict                 # "i:j" -> codeword graph seed
    runtime_seconds: float

    def layer_mean_distortions(self) -> np.ndarray:
        return np.mean(np.array(self.mean_distortions), axis=0)

    def to_json(self, indent: int = 2) -> str:
        payload = asdict(self)
        # wall-clock time is not part of the replayable record: identical
        # seeds must serialize to identical bytes
        payload.pop("runtime_seconds")
        return json.dumps(payload, indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        payload = json.loads(text)
        payload.setdefault("runtime_seconds", 0.0)
        return cls(**payload)


def measure_distortion(block: np.ndarray, estimate: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-component and average MSE between a source block and its estimate."""
    block = np.asarray(block, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if block.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {block.shape} vs {estimate.shape}")
    if block.ndim == 1:
        block = block[None, :]
        estimate = estimate[None, :]
    per = np.mean((block - estimate) ** 2, axis=1)
    return per, float(np.mean(per))


def _solve_allocation(config: ExperimentConfig) -> AllocationSolution:
    spec, chan = config.source, config.channel
    if config.criterion == "mmdp":
        return solve_mmdp(AllocationProblem(spec, chan, config.bandwidth))
    if config.criterion == "mwtd":
        return solve_mwtd(AllocationProblem(spec, chan, config.bandwidth,
                                            weights=config.weights))
    # min-bandwidth: closed form; distortion targets define the layer points
    b_star, rates = min_bandwidth(spec, chan, list(config.target_distortions))
    pts = [rate_of_distortion(spec, d) for d in config.target_distortions]
    D = np.array([pt.per_component for pt in pts]).T
    problem = AllocationProblem(spec, chan, bandwidth=max(b_star, 1e-12))
    return AllocationSolution(problem=problem, criterion="mb",
                              layer_rates=np.array(rates), distortions=D,
                              objective=b_star, kkt_residual=0.0)


@dataclass
class _Context:
    """Per-experiment immutable state shared by all trial workers."""

    config: ExperimentConfig
    qmodel: QuantizerModel
    plan: TransmissionPlan
    graphs: dict[tuple[int, int], CodeGraph]


_WORKER_CTX: _Context | None = None


def _init_worker(ctx: _Context) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _run_trial(args) -> tuple[np.ndarray, dict]:
    """One Monte Carlo trial: returns (s x L distortions, failure dict)."""
    ctx, trial = args
    if ctx is None:
        ctx = _WORKER_CTX
    config = ctx.config
    spec, chan = config.source, config.channel
    s, L, k = spec.count, chan.users, spec.block_length
    qm = ctx.qmodel
    planes = ctx.plan.bitplanes

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        entropy=config.master_seed, spawn_key=(_DOM_SOURCE, trial))))
    sigmas = np.sqrt(np.array(spec.variances))
    block = sigmas[:, None] * rng.standard_normal((s, k))

    source_bits = [bitplanes(qm, block[i], scale=float(sigmas[i])).bits for i in range(s)]
    parities = {key: encode(g, source_bits[key[0]][key[1] - 1])
                for key, g in ctx.graphs.items()}

    distortions = np.zeros((s, L))
    failures: dict[str, int] = {}
    for l in range(L):
        eps = chan.erasure_probs[l]
        stages = []
        truth = []
        for i in range(s):
            for j in range(1, int(planes[i, l]) + 1):
                seed = derive_seed(config.master_seed, _DOM_CHANNEL, trial, l, i, j)
                received = transmit(parities[(i, j)], eps, seed)
                stages.append(DecodeStage(graph=ctx.graphs[(i, j)],
                                          received=received, component=i, plane=j))
                truth.append(source_bits[i][j - 1])
        results = multistage_decode(stages, qm, max_iters=config.max_iters,
                                    damping=config.damping,
                                    soft_priors=config.soft_priors)
        for stage, res, tru in zip(stages, results, truth):
            if not np.array_equal(res.hard_bits, tru):
                key = f"{l}:{stage.component}:{stage.plane}"
                failures[key] = failures.get(key, 0) + 1
        by_comp: dict[int, list[np.ndarray]] = {}
        for stage, res in zip(stages, results):
            by_comp.setdefault(stage.component, []).append(res.posterior_p1)
        for i in range(s):
            if i in by_comp:
                post = np.vstack(by_comp[i])
                estimate = soft_reconstruct(qm, post, scale=float(sigmas[i]))
            else:
                estimate = np.zeros(k)
            per, _ = measure_distortion(block[i], estimate)
            distortions[i, l] = per[0]
    return distortions, failures


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Execute the full chain for one configuration and gather statistics."""
    start = time.time()
    spec, chan = config.source, config.channel
    s, L, k = spec.count, chan.users, spec.block_length

    qm = build_quantizer(config.quantizer_depth)
    solution = _solve_allocation(config)
    plan = round_bitplanes(solution, qm, mode=config.rounding)
    overheads = (np.asarray(config.overheads, dtype=float)
                 if config.overheads is not None
                 else default_overheads(chan, config.overhead_fraction))
    plan = plan_codewords(plan, qm, spec, chan, overheads)

    graphs = {}
    graph_seeds = {}
    for (i, j), n in plan.codeword_lengths.items():
        seed = derive_seed(config.master_seed, _DOM_CODE, i, j)
        graph_seeds[(i, j)] = seed
        precode = default_precode(float(qm.plane_entropies[j - 1]))
        graphs[(i, j)] = sample_graph(k, n, seed, precode=precode)

    ctx = _Context(config=config, qmodel=qm, plan=plan, graphs=graphs)
    trials = config.trials
    if config.jobs > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=config.jobs,
                                 initializer=_init_worker, initargs=(ctx,)) as pool:
            outcomes = list(pool.map(_run_trial, [(None, t) for t in range(trials)]))
    else:
        outcomes = [_run_trial((ctx, t)) for t in range(trials)]

    trial_d = np.array([d for d, _ in outcomes])  # (trials, s, L)
    failures: dict[str, int] = {}
    for _, f in outcomes:
        for key, cnt in f.items():
            failures[key] = failures.get(key, 0) + cnt

    mean_d = trial_d.mean(axis=0)
    stderr_d = (trial_d.std(axis=0, ddof=1) / np.sqrt(trials)
                if trials > 1 else np.zeros_like(mean_d))
    predicted = np.array([
        [spec.variances[i] * quantizer_distortion(qm, int(plan.bitplanes[i, l]))
         for l in range(L)] for i in range(s)
    ])

    return ExperimentReport(
        config=config.to_dict(),
        layer_rates=[float(r) for r in solution.layer_rates],
        target_distortions=solution.distortions.tolist(),
        objective=float(solution.objective),
        kkt_residual=float(solution.kkt_residual),
        bitplanes=plan.bitplanes.tolist(),
        codeword_lengths={f"{i}:{j}": int(n) for (i, j), n in plan.codeword_lengths.items()},
        owner_layers={f"{i}:{j}": int(l) for (i, j), l in plan.owner_layers.items()},
        overheads=[float(x) for x in plan.overheads],
        effective_bandwidth=float(plan.effective_bandwidth),
        quantizer_gamma=float(qm.gamma_fit),
        plane_entropies=[float(h) for h in qm.plane_entropies],
        predicted_distortions=predicted.tolist(),
        trial_distortions=trial_d.tolist(),
        mean_distortions=mean_d.tolist(),
        stderr_distortions=stderr_d.tolist(),
        decode_failures=failures,
        decode_attempts=trials,
        graph_seeds={f"{i}:{j}": int(seed) for (i, j), seed in graph_seeds.items()},
        runtime_seconds=time.time() - start,
    )
