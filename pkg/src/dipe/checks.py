"""Seeded invariant checks behind ``dipe verify``.

Each check returns a :class:`CheckResult`; none of them raise on failure.
Sizes are kept small so the whole suite runs in a few seconds.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from dipe.attention import (
    AttentionCase,
    attend_reference,
    attend_split,
    build_masks,
    decode_step,
    pair_logits,
    prefill,
)
from dipe.mrope import ChunkPartition, default_partition, mrope_rotate
from dipe.plan import Image, ModalitySegment, Text, build_plan, extend_plan
from dipe.probe import ProbeConfig, run_probe
from dipe.rope import RopeConfig, decay_bound, rotate


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def random_segments(rng: np.random.Generator, max_tokens: int = 64, max_segments: int = 6,
                    max_text: int = 24) -> list[ModalitySegment]:
    """Random interleaving of text runs and small images, at most ``max_tokens`` long."""
    segs = []
    total = 0
    for _ in range(int(rng.integers(1, max_segments + 1))):
        room = max_tokens - total
        if room < 1:
            break
        if rng.random() < 0.5:
            rows = int(rng.integers(1, 5))
            cols = int(rng.integers(1, 5))
            if rows * cols > room:
                rows, cols = 1, min(cols, room)
            segs.append(Image(rows, cols))
        else:
            segs.append(Text(int(rng.integers(1, min(room, max_text) + 1))))
        total += segs[-1].length
    return segs


def random_mixed_case(rng: np.random.Generator, cfg: RopeConfig, heads: int, max_tokens: int,
                part: ChunkPartition | None = None, visual_bidirectional: bool = False) -> AttentionCase:
    plan = build_plan(random_segments(rng, max_tokens))
    shape = (len(plan), heads, cfg.head_dim)
    q, k, v = (rng.standard_normal(shape) for _ in range(3))
    return AttentionCase(q, k, v, plan, cfg, part, visual_bidirectional=visual_bidirectional)


def check_rotation_identity(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in (2, 4, 48, 64):
        cfg = RopeConfig(d)
        for _ in range(50):
            q, k = rng.standard_normal((2, d))
            m, n = rng.integers(0, 20000, size=2)
            lhs = rotate(q, m, cfg) @ rotate(k, n, cfg)
            rhs = q @ rotate(k, n - m, cfg)
            worst = max(worst, abs(lhs - rhs))
    return CheckResult("rotation_identity", worst <= 1e-9, f"max |err| = {worst:.3g}")


def check_rotation_composition(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(64)
    worst = 0.0
    for _ in range(50):
        v = rng.standard_normal(64)
        a, b = rng.uniform(-5000, 5000, size=2)
        worst = max(worst, np.abs(rotate(rotate(v, a, cfg), b, cfg) - rotate(v, a + b, cfg)).max())
    return CheckResult("rotation_composition", worst <= 1e-9, f"max |err| = {worst:.3g}")


def check_decay_bound(seed: int) -> CheckResult:
    cfg = RopeConfig(64)
    at_zero = decay_bound(0, cfg)
    later = [decay_bound(x, cfg) for x in (256, 1024, 4096, 16384)]
    ok = abs(at_zero - 528.0) <= 528e-9 and all(x < at_zero for x in later)
    return CheckResult("decay_bound", ok, f"B(0) = {at_zero}, later = {[round(x, 3) for x in later]}")


def check_mrope_relative(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(48)
    part = default_partition(cfg)
    worst = 0.0
    for _ in range(50):
        q, k = rng.standard_normal((2, 48))
        pq, pk = rng.integers(0, 5000, size=(2, 3))
        shift = rng.integers(0, 5000, size=3)
        a = mrope_rotate(q, pq, cfg, part) @ mrope_rotate(k, pk, cfg, part)
        b = mrope_rotate(q, pq + shift, cfg, part) @ mrope_rotate(k, pk + shift, cfg, part)
        worst = max(worst, abs(a - b))
    return CheckResult("mrope_relative_identity", worst <= 1e-9, f"max |err| = {worst:.3g}")


def check_plan_invariants(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    problems = []
    for _ in range(50):
        plan = build_plan(random_segments(rng, 80))
        prev_max = -1
        prev_anchor_t = -1
        for span in plan.segment_spans:
            ape = plan.ape[span.start:span.end]
            if not (ape == plan.spe[span.start]).all():
                problems.append("anchor")
            if plan.ape[span.start][0] <= prev_anchor_t:
                problems.append("anchor order")
            prev_anchor_t = plan.ape[span.start][0]
            seg_max = plan.spe[span.start:span.end].max()
            if seg_max < prev_max:
                problems.append("spe order")
            prev_max = seg_max
        grown = extend_plan(plan, int(rng.integers(1, 10)), plan.modality[-1])
        if not (grown.ape[: len(plan)] == plan.ape).all() or not (grown.ape[len(plan):] == plan.ape[-1]).all():
            problems.append("autoregressive")
    return CheckResult("plan_invariants", not problems, "ok" if not problems else ", ".join(sorted(set(problems))))


def check_distractor_invariance(seed: int) -> CheckResult:
    question = 8
    plans = {L: build_plan([Image(4, 4), Text(L + question)]) for L in (0, 64, 256, 1024)}
    ape_q = {L: p.ape[-question:].tolist() for L, p in plans.items()}
    spe_img = {L: p.spe[:16].tolist() for L, p in plans.items()}
    ok = len({str(v) for v in ape_q.values()}) == 1 and len({str(v) for v in spe_img.values()}) == 1
    return CheckResult("distractor_index_invariance", ok, f"question anchor = {ape_q[0][0]}")


def check_mask_partition(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(50):
        plan = build_plan(random_segments(rng, 64))
        masks = build_masks(plan)
        causal = np.tri(len(plan), dtype=bool)
        ok &= bool(((masks.intra | masks.inter) == causal).all() and not (masks.intra & masks.inter).any())
        ok &= int(masks.intra.sum() + masks.inter.sum()) == int(causal.sum())
    return CheckResult("mask_partition", ok, "50 random plans")


def check_merge_exactness(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(48)
    worst_out = worst_lse = 0.0
    for i in range(10):
        case = random_mixed_case(rng, cfg, heads=2, max_tokens=96, visual_bidirectional=bool(i % 2))
        split = attend_split(case)
        ref = attend_reference(case, "dipe")
        worst_out = max(worst_out, np.abs(split.output - ref.output).max())
        worst_lse = max(worst_lse, np.abs(split.lse - ref.lse).max())
    ok = worst_out <= 1e-9 and worst_lse <= 1e-9
    return CheckResult("merge_exactness", ok, f"max |dO| = {worst_out:.3g}, max |dlse| = {worst_lse:.3g}")


def check_intra_parity(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(48)
    ok = True
    for _ in range(10):
        case = random_mixed_case(rng, cfg, heads=2, max_tokens=64)
        dipe, _ = pair_logits(case, "dipe")
        base, _ = pair_logits(case, "baseline")
        vis = case.plan.is_visual
        same = (vis[:, None] == vis[None, :])[:, None, :]
        ok &= bool(np.array_equal(np.where(same, dipe, 0), np.where(same, base, 0)))
    return CheckResult("intra_parity", ok, "bitwise on same-modality pairs")


def distractor_family(lengths=(0, 64, 256, 1024), grid=(4, 4), question=8, head_dim=48, heads=1, seed=0):
    """Cases ``[Image(grid), Text(L + question)]`` sharing image and question content across ``L``."""
    rng = np.random.default_rng(seed)
    n_vis = grid[0] * grid[1]
    pool = rng.standard_normal((3, n_vis + max(lengths) + question, heads, head_dim))
    cfg = RopeConfig(head_dim)
    cases = {}
    for L in lengths:
        idx = np.r_[0:n_vis, n_vis:n_vis + L, n_vis + max(lengths):n_vis + max(lengths) + question]
        plan = build_plan([Image(*grid), Text(L + question)])
        cases[L] = AttentionCase(pool[0][idx], pool[1][idx], pool[2][idx], plan, cfg)
    return cases


def question_visual_logits(case: AttentionCase, question: int, mode: str) -> np.ndarray:
    n = len(case.plan)
    logits, _ = pair_logits(case, mode, np.arange(n - question, n))
    return logits[:, :, case.plan.is_visual]


def check_inter_invariance(seed: int) -> CheckResult:
    cases = distractor_family(seed=seed)
    dipe = {L: question_visual_logits(c, 8, "dipe") for L, c in cases.items()}
    base = {L: question_visual_logits(c, 8, "baseline") for L, c in cases.items()}
    spread = max(np.abs(dipe[L] - dipe[0]).max() for L in dipe)
    moved = np.abs(base[1024] - base[0]).max()
    ok = spread <= 1e-12 and moved > 1e-3
    return CheckResult("inter_invariance", ok, f"dipe spread = {spread:.3g}, mrope shift = {moved:.3g}")


def check_incremental(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(48)
    steps = 16
    plan = build_plan([Image(2, 2), Text(4 + steps)])
    shape = (len(plan), 2, 48)
    q, k, v = (rng.standard_normal(shape) for _ in range(3))
    full = attend_split(AttentionCase(q, k, v, plan, cfg))
    prefix = 8
    _, cache = prefill(AttentionCase(q[:prefix], k[:prefix], v[:prefix], build_plan([Image(2, 2), Text(4)]), cfg))
    worst = 0.0
    for t in range(prefix, len(plan)):
        out, cache = decode_step(cache, q[t], k[t], v[t], "text")
        worst = max(worst, np.abs(out - full.output[t]).max())
    return CheckResult("incremental_equals_batch", worst <= 1e-9, f"max |err| = {worst:.3g}")


def check_probe_invariance(seed: int) -> CheckResult:
    cfg = ProbeConfig(seed=seed, layers=1, distractor_lengths=(0, 64, 256), modes=("mrope", "dipe"))
    report = run_probe(cfg)
    mats = report.inter_logits
    spread = max(np.abs(mats[("dipe", L, 0)] - mats[("dipe", 0, 0)]).max() for L in cfg.distractor_lengths)
    moved = np.abs(mats[("mrope", 256, 0)] - mats[("mrope", 0, 0)]).max()
    ok = spread <= 1e-9 and moved > 1e-3
    return CheckResult("probe_logit_invariance", ok, f"dipe spread = {spread:.3g}, mrope shift = {moved:.3g}")


CHECKS: list[Callable[[int], CheckResult]] = [
    check_rotation_identity,
    check_rotation_composition,
    check_decay_bound,
    check_mrope_relative,
    check_plan_invariants,
    check_distractor_invariance,
    check_mask_partition,
    check_merge_exactness,
    check_intra_parity,
    check_inter_invariance,
    check_incremental,
    check_probe_invariance,
]


def run_checks(seed: int = 0) -> list[CheckResult]:
    results = [check(seed) for check in CHECKS]
    return [r._replace(passed=bool(r.passed)) for r in results]
