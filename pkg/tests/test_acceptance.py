"""Acceptance suite: one recorded pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also collected in the terminal summary.
"""

import io
import json
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from dipe import cli
from dipe.attention import (
    AttentionCase,
    attend_reference,
    attend_split,
    build_masks,
    decode_step,
    pair_logits,
    prefill,
)
from dipe.checks import distractor_family, question_visual_logits, random_segments
from dipe.plan import Image, Text, build_plan
from dipe.probe import ProbeConfig, report_to_csv, run_probe
from dipe.rope import RopeConfig, decay_bound, rotate
from tests.test_plan import WORKED_APE, WORKED_SPE

GOLDEN = Path(__file__).parent / "golden" / "probe_default.csv"
LENGTHS = (0, 64, 256, 1024, 4096)


@pytest.fixture(scope="module")
def default_probe():
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        report = run_probe(ProbeConfig())
        elapsed = time.perf_counter() - t0
    return report, elapsed


def _mixed_case(rng, cfg, heads, max_tokens, visual_bidirectional, causal=True):
    plan = build_plan(random_segments(rng, max_tokens, max_segments=8, max_text=64))
    shape = (len(plan), heads, cfg.head_dim)
    q, k, v = (rng.standard_normal(shape) for _ in range(3))
    return AttentionCase(q, k, v, plan, cfg, causal=causal, visual_bidirectional=visual_bidirectional)


def test_c1_rotation_identity(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, trials = 0.0, 0
    for d in (2, 4, 48, 64):
        cfg = RopeConfig(d)
        for _ in range(250):
            q, k = rng.standard_normal((2, d))
            m, n = (int(x) for x in rng.integers(0, 100_000, size=2))
            lhs = rotate(q, m, cfg) @ rotate(k, n, cfg)
            rhs = q @ rotate(k, n - m, cfg)
            worst = max(worst, abs(lhs - rhs))
            trials += 1
    elapsed = time.perf_counter() - t0
    ok = trials >= 1000 and worst <= 1e-9 and elapsed < 1.0
    criterion("1 rotation identity", ok, f"{trials} trials, max err {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_c2_decay_bound(criterion):
    t0 = time.perf_counter()
    cfg = RopeConfig(64, 10000.0)
    at_zero = decay_bound(0, cfg)
    later = {x: decay_bound(x, cfg) for x in (256, 1024, 4096, 16384)}
    elapsed = time.perf_counter() - t0
    ok = abs(at_zero - 528.0) <= 528.0 * 1e-9 and all(v < at_zero for v in later.values()) and elapsed < 1.0
    shown = ", ".join(f"{k}:{v:.2f}" for k, v in later.items())
    criterion("2 decay bound", ok, f"B(0)={at_zero!r}, {shown}, {elapsed:.2f}s")
    assert ok


def test_c3_merge_exactness(criterion):
    rng = np.random.default_rng(3)
    cfg = RopeConfig(48)
    t0 = time.perf_counter()
    worst_out = worst_lse = 0.0
    empty_intra = empty_inter = 0
    for i in range(50):
        case = _mixed_case(rng, cfg, heads=4, max_tokens=256, visual_bidirectional=bool(i % 2), causal=i % 5 != 4)
        masks = build_masks(case.plan, case.causal, case.visual_bidirectional)
        empty_intra += int((~masks.intra.any(axis=1)).sum())
        empty_inter += int((~masks.inter.any(axis=1)).sum())
        split = attend_split(case)
        ref = attend_reference(case, "dipe")
        worst_out = max(worst_out, float(np.abs(split.output - ref.output).max()))
        finite = np.isfinite(ref.lse)
        assert (np.isfinite(split.lse) == finite).all()
        worst_lse = max(worst_lse, float(np.abs(split.lse[finite] - ref.lse[finite]).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_out <= 1e-9 and worst_lse <= 1e-9 and empty_inter > 0 and elapsed < 30.0
    criterion("3 merge exactness", ok,
              f"max |dO|={worst_out:.2e}, max |dlse|={worst_lse:.2e}, "
              f"empty-row counts intra={empty_intra} inter={empty_inter}, {elapsed:.2f}s")
    assert ok


def test_c4_intra_parity(criterion):
    rng = np.random.default_rng(4)
    cfg = RopeConfig(48)
    equal = 0
    for i in range(20):
        case = _mixed_case(rng, cfg, heads=4, max_tokens=128, visual_bidirectional=bool(i % 2))
        dipe, allowed = pair_logits(case, "dipe")
        base, _ = pair_logits(case, "baseline")
        vis = case.plan.is_visual
        same = ((vis[:, None] == vis[None, :]) & allowed)[:, None, :]
        equal += bool(np.array_equal(dipe[np.broadcast_to(same, dipe.shape)], base[np.broadcast_to(same, base.shape)]))
    ok = equal == 20
    criterion("4 intra-modal parity", ok, f"{equal}/20 cases bitwise equal")
    assert ok


def test_c5_inter_invariance(criterion):
    t0 = time.perf_counter()
    cases = distractor_family(lengths=(0, 64, 256, 1024), heads=4, seed=0)
    dipe = {L: question_visual_logits(c, 8, "dipe") for L, c in cases.items()}
    base = {L: question_visual_logits(c, 8, "baseline") for L, c in cases.items()}
    spread = max(float(np.abs(dipe[L] - dipe[0]).max()) for L in dipe)
    moved = float(np.abs(base[1024] - base[0]).max())
    elapsed = time.perf_counter() - t0
    ok = spread <= 1e-12 and moved > 1e-3 and elapsed < 10.0
    criterion("5 inter-modal invariance", ok, f"dipe spread={spread:.2e}, mrope shift={moved:.3f}, {elapsed:.2f}s")
    assert ok


def test_c6_incremental_equals_batch(criterion):
    rng = np.random.default_rng(6)
    cfg = RopeConfig(48)
    steps = 32
    plan = build_plan([Image(2, 2), Text(4 + steps)])
    q, k, v = (rng.standard_normal((len(plan), 4, 48)) for _ in range(3))
    full = attend_split(AttentionCase(q, k, v, plan, cfg))
    prefix = 8
    _, cache = prefill(AttentionCase(q[:prefix], k[:prefix], v[:prefix], build_plan([Image(2, 2), Text(4)]), cfg))
    snapshot = cache.keys.tobytes()
    worst = 0.0
    untouched = True
    for t in range(prefix, len(plan)):
        before = cache.keys.tobytes()
        out, cache = decode_step(cache, q[t], k[t], v[t], "text")
        worst = max(worst, float(np.abs(out - full.output[t]).max()))
        untouched &= cache.keys[: t].tobytes() == before
    untouched &= cache.keys[:prefix].tobytes() == snapshot
    ok = worst <= 1e-9 and untouched and cache.plan == plan
    criterion("6 incremental = batch", ok, f"{steps} steps, max err {worst:.2e}, keys untouched={untouched}")
    assert ok


def test_c7_mask_partition(criterion):
    rng = np.random.default_rng(7)
    good = 0
    for _ in range(100):
        plan = build_plan(random_segments(rng, 96, max_segments=8))
        masks = build_masks(plan)
        causal = np.tri(len(plan), dtype=bool)
        disjoint = not (masks.intra & masks.inter).any()
        covers = ((masks.intra | masks.inter) == causal).all()
        counts = int(masks.intra.sum()) + int(masks.inter.sum()) == int(causal.sum())
        good += bool(disjoint and covers and counts)
    ok = good == 100
    criterion("7 mask partition", ok, f"{good}/100 plans exact")
    assert ok


def test_c8a_mrope_logit_fades(default_probe, criterion):
    report, _ = default_probe
    per_layer = {}
    for layer in range(report.config.layers):
        per_layer[layer] = (abs(report.row("mrope", 0, layer).mean_inter_logit),
                            abs(report.row("mrope", 4096, layer).mean_inter_logit))
    ok = all(far < near for near, far in per_layer.values())
    shown = ", ".join(f"layer {k}: {a:.3f} -> {b:.3f}" for k, (a, b) in per_layer.items())
    criterion("8a mrope inter logit fades with distractor", ok, shown)
    assert ok


def test_c8b_dipe_logit_constant(default_probe, criterion):
    report, _ = default_probe
    spreads = {}
    for layer in range(report.config.layers):
        vals = [report.row("dipe", L, layer).mean_inter_logit for L in LENGTHS]
        spreads[layer] = max(vals) - min(vals)
    ok = all(s <= 1e-9 for s in spreads.values())
    shown = ", ".join(f"layer {k} spread {s:.2e}" for k, s in spreads.items())
    criterion("8b dipe inter logit constant across lengths", ok, shown)
    assert ok


def test_c8c_dipe_keeps_visual_mass(default_probe, criterion):
    report, _ = default_probe
    pairs = {layer: (report.row("dipe", 4096, layer).visual_mass, report.row("mrope", 4096, layer).visual_mass)
             for layer in range(report.config.layers)}
    ok = all(d >= m for d, m in pairs.values())
    shown = ", ".join(f"layer {k}: dipe {d:.4f} vs mrope {m:.4f}" for k, (d, m) in pairs.items())
    criterion("8c dipe visual mass >= mrope at L=4096", ok, shown)
    assert ok


def test_c8d_golden_csv(default_probe, criterion):
    report, elapsed = default_probe
    fresh = report_to_csv(report)
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli.main(["probe", "--threads", "1"])
    same = fresh == GOLDEN.read_text() and buf.getvalue() == fresh and code == 0
    ok = same and elapsed < 60.0
    criterion("8d golden probe CSV byte-identical", ok, f"identical={same}, probe runtime {elapsed:.2f}s")
    assert ok


def test_c9_plan_correctness(criterion):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli.main(["plan", "--segments", "txt:3,img:2x2,txt:2"])
    doc = json.loads(buf.getvalue())
    ok = code == 0 and doc["spe"] == WORKED_SPE and doc["ape"] == WORKED_APE and len(doc["modality"]) == 9
    criterion("9 plan correctness", ok, f"spe={doc['spe']}")
    assert ok
