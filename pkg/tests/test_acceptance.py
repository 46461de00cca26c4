"""Acceptance suite: one test per criterion, each printing PASS/FAIL lines.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
report.  Criteria 1-5, 7 and 8 are expected green.  Criterion 6 checks the
fixed 5%-gap operating point plane by plane; the planes whose conditional
entropy falls in the mid range cannot be decoded by belief propagation at
that gap with the prescribed output degree distribution (see the decisions
ledger shipped alongside the repository), so that test reports honest
failures for them while the realized-bandwidth windows still hold.
"""

import math
import os
import time

import numpy as np
import pytest

from layercast.rd_math import (SourceSpec, ChannelSpec, rate_of_distortion,
                               distortion_of_rate, rate_increment, min_bandwidth)
from layercast.allocator import (AllocationProblem, solve_mwtd, solve_mmdp,
                                 round_bitplanes, plan_codewords, default_overheads)
from layercast.quantizer import build_quantizer, fit_gamma
from layercast.raptor import sample_graph, encode, bp_decode
from layercast.channel import transmit
from layercast.pipeline import ExperimentConfig, run_experiment
from layercast.cli import MWTD_REFERENCE_WEIGHTS

from _oracles import (grid_oracle, oracle_user_bound, enum_posteriors,
                      forest_graph, dense_encode_oracle)

VARIANCES = (50.0, 12.0, 8.0, 5.0)
CAPACITIES = (0.3645, 0.81, 0.9)
SPEC = SourceSpec(VARIANCES, block_length=10000)
CHAN = ChannelSpec(tuple(1.0 - c for c in CAPACITIES))
JOBS = max(1, min(4, os.cpu_count() or 1))


def report(criterion, ok, detail):
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


# ---------------------------------------------------------------------------
# 1. min-max penalty reproduction (theory)
# ---------------------------------------------------------------------------

def test_criterion_1_mmdp_theory():
    start = time.time()
    sol = solve_mmdp(AllocationProblem(SPEC, CHAN, 2.5))
    elapsed = time.time() - start
    reference = np.array([[9.8, 1.74, 1.27], [9.8, 1.74, 1.27],
                          [8.0, 1.74, 1.27], [5.0, 1.74, 1.27]])
    rel = float(np.max(np.abs(sol.distortions - reference) / reference))
    saturation = abs(float(np.sum(sol.layer_rates / np.array(CAPACITIES))) - 1.0)
    ok = rel <= 0.03 and saturation <= 1e-6 and elapsed < 1.0
    assert report(1, ok,
                  f"min-max distortions within {rel:.2%} of reference "
                  f"(tol 3%), |sum R/C - 1| = {saturation:.1e}, "
                  f"{elapsed*1e3:.0f} ms")
    assert rel <= 0.03
    assert saturation <= 1e-6
    assert elapsed < 1.0


# ---------------------------------------------------------------------------
# 2. minimum-bandwidth closed form
# ---------------------------------------------------------------------------

def test_criterion_2_min_bandwidth():
    start = time.time()
    b_top, rates = min_bandwidth(SPEC, CHAN, [8.15, 1.74, 1.27])
    b_bottom, _ = min_bandwidth(SPEC, CHAN, [7.5675, 2.05, 1.395])
    elapsed = time.time() - start
    used = float(np.sum(np.array(rates) / np.array(CAPACITIES)))
    ok = (abs(b_top - 2.50) <= 0.02 and 2.45 <= b_bottom <= 2.60
          and abs(used - 1.0) <= 1e-9 and elapsed < 1.0)
    assert report(2, ok,
                  f"b* = {b_top:.4f} at the target distortions (2.50 +- 0.02), "
                  f"b* = {b_bottom:.4f} at the realized-table averages "
                  f"(window [2.45, 2.60] brackets both derivations), "
                  f"{elapsed*1e3:.0f} ms")


# ---------------------------------------------------------------------------
# 3. weighted-distortion reproduction and solver-vs-oracle agreement
# ---------------------------------------------------------------------------

def test_criterion_3_mwtd():
    start = time.time()
    sol = solve_mwtd(AllocationProblem(SPEC, CHAN, 8.75,
                                       weights=MWTD_REFERENCE_WEIGHTS))
    d = sol.distortions
    hit1 = bool(np.all(np.abs(d[:, 0] - 0.22) <= 0.01))
    hit23 = bool(np.all(np.abs(d[:, 1:] - 0.09) <= 0.005))

    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(3):
        s = int(rng.integers(1, 4))
        L = int(rng.integers(1, 3))
        v = tuple(sorted((float(x) for x in rng.uniform(0.5, 20.0, s)), reverse=True))
        caps = tuple(sorted(float(x) for x in rng.uniform(0.2, 0.95, L)))
        spec = SourceSpec(v)
        chan = ChannelSpec(tuple(1.0 - c for c in caps))
        b = float(rng.uniform(0.5, 4.0))
        w = tuple(float(x) for x in rng.uniform(0.1, 2.0, L))
        got = solve_mwtd(AllocationProblem(spec, chan, b, weights=w)).objective
        ref = grid_oracle(v, caps, b, weights=w)
        worst = max(worst, abs(got - ref) / max(ref, 1e-9))
    elapsed = time.time() - start
    ok = hit1 and hit23 and worst <= 1e-3 and elapsed < 30.0
    assert report(3, ok,
                  f"weights {MWTD_REFERENCE_WEIGHTS} give layer distortions "
                  f"{d[0, 0]:.4f} / {d[0, 1]:.4f} / {d[0, 2]:.4f} "
                  f"(targets 0.22 +- 0.01, 0.09 +- 0.005); grid-oracle gap "
                  f"{worst:.1e} (tol 1e-3); {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 4. quantizer quality
# ---------------------------------------------------------------------------

def test_criterion_4_quantizer():
    model = build_quantizer(10)
    gamma = fit_gamma(model)
    snr = -10.0 * np.log10(model.distortions[1:])
    gains = snr[2:] - snr[1:-1]  # plane p -> p+1 for p = 2..9
    chain_gap = abs(model.plane_entropies.sum()
                    - float(-(model.masses[10][model.masses[10] > 0]
                              * np.log2(model.masses[10][model.masses[10] > 0])).sum()))

    # Monte Carlo plug-in conditional entropies, 1e7 samples in chunks
    rng = np.random.default_rng(8)
    depth = model.depth
    counts = np.zeros(1 << depth, dtype=np.int64)
    total = 10 ** 7
    for _ in range(10):
        x = rng.standard_normal(total // 10)
        counts += np.bincount(
            np.searchsorted(model.boundaries[depth], x, side="right"),
            minlength=1 << depth)
    mc_gap = 0.0
    for j in range(1, depth + 1):
        child = counts.reshape(1 << j, -1).sum(axis=1) / total
        parent = child.reshape(-1, 2).sum(axis=1)
        upper = child[1::2]
        with np.errstate(invalid="ignore"):
            frac = np.where(parent > 0, upper / np.maximum(parent, 1e-300), 0.0)
        hb = np.zeros_like(frac)
        mask = (frac > 0) & (frac < 1)
        hb[mask] = -(frac[mask] * np.log2(frac[mask])
                     + (1 - frac[mask]) * np.log2(1 - frac[mask]))
        mc_gap = max(mc_gap, abs(float((parent * hb).sum())
                                 - float(model.plane_entropies[j - 1])))

    ok = (1.35 <= gamma <= 1.75 and gains.min() >= 5.3 and gains.max() <= 6.7
          and chain_gap < 1e-10 and mc_gap < 0.003)
    assert report(4, ok,
                  f"gamma fit {gamma:.4f} in [1.35, 1.75]; per-plane gains in "
                  f"[{gains.min():.2f}, {gains.max():.2f}] dB (band [5.3, 6.7]); "
                  f"chain-rule gap {chain_gap:.1e} (tol 1e-10); Monte Carlo "
                  f"entropy gap {mc_gap:.2e} bits (tol 0.003)")


# ---------------------------------------------------------------------------
# 5. codec correctness against enumeration and dense algebra
# ---------------------------------------------------------------------------

def test_criterion_5_codec():
    rng = np.random.default_rng(3)
    worst_tree = 0.0
    for trial in range(20):
        k = int(rng.integers(8, 21))
        g = forest_graph(k, rng)
        u = rng.integers(0, 2, k).astype(np.uint8)
        received = transmit(encode(g, u), 0.3, seed=trial)
        priors = rng.uniform(0.05, 0.95, k)
        res = bp_decode(g, received, priors)
        exact = enum_posteriors(g, received, priors)
        worst_tree = max(worst_tree, float(np.max(np.abs(res.posterior_p1 - exact))))

    from layercast.raptor import PrecodeConfig
    mismatches = 0
    for trial in range(1000):
        k = int(rng.integers(4, 33))
        n = int(rng.integers(1, 48))
        pre = PrecodeConfig(3, 10) if trial % 4 == 0 else None
        g = sample_graph(k, n, seed=10_000 + trial, precode=pre)
        u = rng.integers(0, 2, k).astype(np.uint8)
        if not np.array_equal(encode(g, u), dense_encode_oracle(g, u)):
            mismatches += 1

    ok = worst_tree < 1e-6 and mismatches == 0
    assert report(5, ok,
                  f"tree-residual posteriors within {worst_tree:.1e} of "
                  f"enumeration (tol 1e-6); {1000 - mismatches}/1000 random "
                  f"codewords match the dense GF(2) oracle")


# ---------------------------------------------------------------------------
# 6. fixed 5%-gap operating point at k = 10000
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mmdp_operating_report():
    config = ExperimentConfig(source=SPEC, channel=CHAN, criterion="mmdp",
                              bandwidth=2.5, overhead_fraction=0.05,
                              trials=50, master_seed=20240808, jobs=JOBS)
    return run_experiment(config)


def test_criterion_6_operating_point(mmdp_operating_report):
    rep = mmdp_operating_report
    bhat_mmdp = rep.effective_bandwidth
    ok_bhat_mmdp = 3.0 <= bhat_mmdp <= 4.2

    sol = solve_mwtd(AllocationProblem(SPEC, CHAN, 8.75,
                                       weights=MWTD_REFERENCE_WEIGHTS))
    qm = build_quantizer(10)
    plan = plan_codewords(round_bitplanes(sol, qm), qm, SPEC, CHAN,
                          default_overheads(CHAN, 0.05))
    bhat_mwtd = plan.effective_bandwidth
    ok_bhat_mwtd = 9.5 <= bhat_mwtd <= 12.0

    print(f"\n[criterion 6] realized bandwidth: min-max plan "
          f"{bhat_mmdp:.3f} (window [3.0, 4.2]) "
          f"{'PASS' if ok_bhat_mmdp else 'FAIL'}; weighted plan "
          f"{bhat_mwtd:.3f} (window [9.5, 12.0]) "
          f"{'PASS' if ok_bhat_mwtd else 'FAIL'}")

    entropies = rep.plane_entropies
    trials = rep.decode_attempts
    failures_by_plane = {}
    for key, count in rep.decode_failures.items():
        layer, comp, plane = (int(x) for x in key.split(":"))
        if rep.owner_layers[f"{comp}:{plane}"] == layer:
            failures_by_plane[(comp, plane)] = count
    all_planes_ok = True
    print(f"[criterion 6] per-plane decode success at the owning layer "
          f"({trials} trials, gap 0.05*C):")
    for key in sorted(rep.codeword_lengths):
        comp, plane = (int(x) for x in key.split(":"))
        owner = rep.owner_layers[key]
        fails = failures_by_plane.get((comp, plane), 0)
        rate = 1.0 - fails / trials
        ok = rate >= 0.9
        all_planes_ok &= ok
        print(f"  component {comp} plane {plane} (H={entropies[plane-1]:.3f}, "
              f"layer {owner}): {rate:.2f} {'PASS' if ok else 'FAIL'}")
    if not all_planes_ok:
        print("[criterion 6] NOTE: planes with mid-range conditional entropy "
              "sit below the belief-propagation recovery threshold of the "
              "prescribed output degree distribution at a 5% gap; no belief-"
              "propagation decoder can reach them at this rate (measured "
              "repeatedly up to a 30% gap). See the decisions ledger.")

    assert ok_bhat_mmdp and ok_bhat_mwtd
    assert report(6, all_planes_ok,
                  f"all planes >= 90% decode success: {all_planes_ok}")


# ---------------------------------------------------------------------------
# 7. clean-channel transparency at k = 10000
# ---------------------------------------------------------------------------

def test_criterion_7_transparency():
    config = ExperimentConfig(
        source=SPEC, channel=ChannelSpec((0.0, 0.0, 0.0)), criterion="mmdp",
        bandwidth=2.5, overhead_fraction=0.5, trials=20,
        master_seed=77, jobs=JOBS)
    rep = run_experiment(config)
    measured = np.array(rep.trial_distortions)
    predicted = np.array(rep.predicted_distortions)
    mean = measured.mean(axis=0)
    stderr = measured.std(axis=0, ddof=1) / math.sqrt(measured.shape[0])
    band = np.maximum(3.0 * stderr, 1e-12)
    inside = np.abs(mean - predicted) <= band
    ok = bool(np.all(inside)) and not rep.decode_failures
    worst = float(np.max(np.abs(mean - predicted) / np.maximum(band, 1e-30)))
    assert report(7, ok,
                  f"zero-erasure channel: every measured distortion within its "
                  f"3-sigma Monte Carlo band of the exact quantizer value "
                  f"(worst deviation {worst:.2f} bands, decode failures: "
                  f"{sum(rep.decode_failures.values())})")


# ---------------------------------------------------------------------------
# 8. property suites
# ---------------------------------------------------------------------------

def test_criterion_8_properties():
    rng = np.random.default_rng(5)
    # waterfilling round trip at 1e-9
    worst_rt = 0.0
    for _ in range(150):
        s = int(rng.integers(1, 7))
        v = tuple(sorted((10.0 ** rng.uniform(-2, 2) for _ in range(s)), reverse=True))
        spec = SourceSpec(v)
        r = float(rng.uniform(0, 10))
        worst_rt = max(worst_rt, abs(
            rate_of_distortion(spec, distortion_of_rate(spec, r).avg_distortion).rate - r))
    # successive refinability at 1e-12
    worst_sr = 0.0
    for _ in range(150):
        s = int(rng.integers(1, 7))
        v = tuple(sorted((10.0 ** rng.uniform(-2, 2) for _ in range(s)), reverse=True))
        spec = SourceSpec(v)
        r1 = float(rng.uniform(0, 6))
        r2 = r1 + float(rng.uniform(0, 6))
        inc = rate_increment(spec, distortion_of_rate(spec, r1).level,
                             distortion_of_rate(spec, r2).level)
        worst_sr = max(worst_sr, abs(inc - (r2 - r1)))
    # capacity-face saturation and layer monotonicity on the benchmark
    sol = solve_mmdp(AllocationProblem(SPEC, CHAN, 2.5))
    saturation = abs(float(np.sum(sol.layer_rates / np.array(CAPACITIES))) - 1.0)
    monotone = bool(np.all(np.diff(sol.distortions.mean(axis=0)) <= 1e-9))
    # report replay bit-exactness on a small end-to-end instance
    config = ExperimentConfig(source=SourceSpec((4.0, 1.0), block_length=500),
                              channel=ChannelSpec((0.25, 0.05)), criterion="mmdp",
                              bandwidth=1.5, quantizer_depth=6,
                              overhead_fraction=0.4, trials=3, master_seed=13)
    replay = run_experiment(config).to_json() == run_experiment(config).to_json()

    ok = (worst_rt < 1e-9 and worst_sr < 1e-12 and saturation < 1e-6
          and monotone and replay)
    assert report(8, ok,
                  f"round-trip {worst_rt:.1e} (tol 1e-9); refinability "
                  f"{worst_sr:.1e} (tol 1e-12); saturation {saturation:.1e}; "
                  f"layer distortions monotone: {monotone}; replay bit-exact: "
                  f"{replay}")
