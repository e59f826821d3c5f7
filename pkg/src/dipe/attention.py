"""Modality-split attention with LogSumExp merging.

Two dense kernels run side by side:

* intra: SPE-rotated queries against SPE-rotated keys, same-modality pairs only;
* inter: APE-rotated queries against the same keys, cross-modality pairs only.

Each returns its normalised output and per-row LogSumExp ``l``; the rows are
recombined with ``alpha = sigmoid(l_intra - l_inter)``, which reproduces one
global softmax over the union of both masks. :func:`attend_reference`
computes that global softmax directly and serves as the oracle.

Arrays are laid out ``(tokens, heads, head_dim)``. Kernels walk query rows in
blocks of :data:`ROW_BLOCK`; each row still reduces over its whole key range,
so blocking never changes results. Logits are scaled by ``1/sqrt(head_dim)``
before the softmax and the LSE statistic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Literal, NamedTuple

import numpy as np

from dipe.errors import DipeError
from dipe.mrope import ChunkPartition, default_partition, mrope_rotate
from dipe.plan import (
    Modality,
    PositionPlan,
    build_plan,
    extend_plan,
    parse_segments,
    plan_from_dict,
    plan_to_dict,
    segments_from_json,
)
from dipe.rope import RopeConfig

ROW_BLOCK = 256

Mode = Literal["baseline", "dipe"]


@dataclass
class AttentionCase:
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    plan: PositionPlan
    cfg: RopeConfig
    partition: ChunkPartition | None = None
    causal: bool = True
    # let patches of one image attend to each other in both directions
    visual_bidirectional: bool = False

    def __post_init__(self):
        if self.partition is None:
            self.partition = default_partition(self.cfg)
        self.partition.check(self.cfg)
        self.queries = np.asarray(self.queries)
        self.keys = np.asarray(self.keys)
        self.values = np.asarray(self.values)
        shape = self.queries.shape
        if len(shape) != 3 or shape[-1] != self.cfg.head_dim:
            raise DipeError("dim_mismatch", f"queries must be (tokens, heads, {self.cfg.head_dim}), got {shape}")
        if self.keys.shape != shape or self.values.shape[:2] != shape[:2]:
            raise DipeError("dim_mismatch", f"q/k/v shapes disagree: {shape}, {self.keys.shape}, {self.values.shape}")
        if shape[0] != len(self.plan):
            raise DipeError("dim_mismatch", f"{shape[0]} tokens but the plan covers {len(self.plan)}")

    @property
    def dtype(self):
        return np.result_type(self.queries, self.keys, self.values, np.float32)

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.cfg.head_dim)


class MaskPair(NamedTuple):
    intra: np.ndarray
    inter: np.ndarray


@dataclass
class AttentionResult:
    output: np.ndarray  # (n, heads, d)
    lse: np.ndarray  # (n, heads); -inf where a row permits no key
    alpha: np.ndarray | None = None  # (n, heads) intra-kernel weight, split path only


def allowed_mask(plan: PositionPlan, causal: bool = True, visual_bidirectional: bool = False) -> np.ndarray:
    n = len(plan)
    if not causal:
        return np.ones((n, n), dtype=bool)
    allowed = np.tri(n, dtype=bool)
    if visual_bidirectional:
        seg = plan.segment_ids
        vis = plan.is_visual
        allowed |= (seg[:, None] == seg[None, :]) & vis[:, None]
    return allowed


def build_masks(plan: PositionPlan, causal: bool = True, visual_bidirectional: bool = False) -> MaskPair:
    """Split the attention pattern by whether query and key share a modality."""
    if len(plan) == 0:
        raise DipeError("empty_sequence", "plan has no tokens")
    allowed = allowed_mask(plan, causal, visual_bidirectional)
    vis = plan.is_visual
    same = vis[:, None] == vis[None, :]
    return MaskPair(allowed & same, allowed & ~same)


def softmax_rows_with_lse(logits, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Masked softmax over the last axis plus its natural-log partition function.

    Rows with no permitted entry get all-zero weights and ``lse = -inf``.
    """
    logits = np.asarray(logits)
    if not np.issubdtype(logits.dtype, np.floating):
        logits = logits.astype(np.float64)
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    masked = np.where(mask, logits, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(row_max), row_max, 0)
    e = np.exp(masked - shift)
    total = e.sum(axis=-1, keepdims=True)
    weights = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
    with np.errstate(divide="ignore"):
        lse = (np.log(total) + shift)[..., 0]
    return weights, lse


def masked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, scale: float):
    """One dense attention kernel returning ``(output, lse)``.

    ``q`` is ``(m, heads, d)``, ``k``/``v`` are ``(n, heads, d)`` and ``mask``
    is ``(m, n)``. Rows with an empty mask output zeros with ``lse = -inf``.
    """
    m, heads, _ = q.shape
    out = np.zeros((m, heads, v.shape[-1]), dtype=np.result_type(q, v))
    lse = np.full((m, heads), -np.inf, dtype=out.dtype)
    kt = k.transpose(1, 2, 0)
    vh = v.transpose(1, 0, 2)
    for lo in range(0, m, ROW_BLOCK):
        hi = min(lo + ROW_BLOCK, m)
        logits = (q[lo:hi].transpose(1, 0, 2) @ kt) * scale  # (heads, rows, n)
        weights, block_lse = softmax_rows_with_lse(logits, mask[None, lo:hi])
        out[lo:hi] = (weights @ vh).transpose(1, 0, 2)
        lse[lo:hi] = block_lse.T
    return out, lse


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z))


def merge_lse(o1, l1, o2, l2):
    """Combine two partial softmax results over disjoint key sets.

    Returns ``(output, lse, alpha)`` with ``alpha = sigmoid(l1 - l2)`` the
    weight of the first kernel. A kernel with ``l = -inf`` gets weight 0; if
    both are empty, the (zero) first output is kept and ``lse = -inf``.
    """
    l1 = np.asarray(l1)
    l2 = np.asarray(l2)
    both_empty = np.isneginf(l1) & np.isneginf(l2)
    with np.errstate(invalid="ignore"):
        diff = np.where(both_empty, np.inf, l1 - l2)
    alpha = sigmoid(diff).astype(np.result_type(l1, l2), copy=False)
    a = alpha[..., None]
    out = a * o1 + (1 - a) * o2
    return out, np.logaddexp(l1, l2), alpha


def _rotated_views(case: AttentionCase):
    spe = case.plan.spe[:, None, :]
    ape = case.plan.ape[:, None, :]
    q_spe = mrope_rotate(case.queries, spe, case.cfg, case.partition).astype(case.dtype, copy=False)
    q_ape = mrope_rotate(case.queries, ape, case.cfg, case.partition).astype(case.dtype, copy=False)
    k = mrope_rotate(case.keys, spe, case.cfg, case.partition).astype(case.dtype, copy=False)
    return q_spe, q_ape, k


def attend_split(case: AttentionCase) -> AttentionResult:
    """Intra and inter kernels run separately, then merged through their LSEs."""
    q_spe, q_ape, k = _rotated_views(case)
    v = case.values.astype(case.dtype, copy=False)
    masks = build_masks(case.plan, case.causal, case.visual_bidirectional)
    o_intra, l_intra = masked_attention(q_spe, k, v, masks.intra, case.scale)
    o_inter, l_inter = masked_attention(q_ape, k, v, masks.inter, case.scale)
    out, lse, alpha = merge_lse(o_intra, l_intra, o_inter, l_inter)
    return AttentionResult(out, lse, alpha)


def attend_baseline(case: AttentionCase) -> AttentionResult:
    """Ordinary single-kernel attention with SPE on both sides."""
    q_spe, _, k = _rotated_views(case)
    allowed = allowed_mask(case.plan, case.causal, case.visual_bidirectional)
    out, lse = masked_attention(q_spe, k, case.values.astype(case.dtype, copy=False), allowed, case.scale)
    return AttentionResult(out, lse)


def attend(case: AttentionCase, mode: Mode = "dipe") -> AttentionResult:
    """Production path: split kernels for ``dipe``, one kernel for ``baseline``."""
    if mode == "dipe":
        return attend_split(case)
    if mode == "baseline":
        return attend_baseline(case)
    raise DipeError("bad_mode", f"mode must be 'baseline' or 'dipe', got {mode!r}")


def pair_logits(case: AttentionCase, mode: Mode = "dipe", rows=None):
    """Scaled logits for query ``rows`` against every key, shape ``(rows, heads, n)``.

    In ``dipe`` mode a query uses its SPE rotation for same-modality keys and
    its APE rotation for the others; ``baseline`` always uses SPE. Also
    returns the ``(rows, n)`` permission mask.
    """
    if mode not in ("baseline", "dipe"):
        raise DipeError("bad_mode", f"mode must be 'baseline' or 'dipe', got {mode!r}")
    rows = np.arange(len(case.plan)) if rows is None else np.asarray(rows)
    plan = case.plan
    k = mrope_rotate(case.keys, plan.spe[:, None, :], case.cfg, case.partition).astype(case.dtype, copy=False)
    q = case.queries[rows]
    q_spe = mrope_rotate(q, plan.spe[rows][:, None, :], case.cfg, case.partition).astype(case.dtype, copy=False)
    kt = k.transpose(1, 2, 0)
    logits = (q_spe.transpose(1, 0, 2) @ kt).transpose(1, 0, 2) * case.scale
    if mode == "dipe":
        q_ape = mrope_rotate(q, plan.ape[rows][:, None, :], case.cfg, case.partition).astype(case.dtype, copy=False)
        cross = (q_ape.transpose(1, 0, 2) @ kt).transpose(1, 0, 2) * case.scale
        vis = plan.is_visual
        same = vis[rows][:, None] == vis[None, :]
        logits = np.where(same[:, None, :], logits, cross)
    allowed = allowed_mask(plan, case.causal, case.visual_bidirectional)[rows]
    return logits, allowed


def attention_probs(case: AttentionCase, mode: Mode = "dipe", rows=None):
    """Global softmax weights ``(rows, heads, n)`` for the requested query rows, with their logits."""
    logits, allowed = pair_logits(case, mode, rows)
    weights, _ = softmax_rows_with_lse(logits, allowed[:, None, :])
    return weights, logits, allowed


def attend_reference(case: AttentionCase, mode: Mode = "dipe") -> AttentionResult:
    """Dense oracle: pick each pair's logit, then one softmax per (query, head)."""
    n, heads, _ = case.queries.shape
    v = case.values.astype(case.dtype, copy=False)
    out = np.zeros((n, heads, v.shape[-1]), dtype=case.dtype)
    lse = np.full((n, heads), -np.inf, dtype=case.dtype)
    for lo in range(0, n, ROW_BLOCK):
        rows = np.arange(lo, min(lo + ROW_BLOCK, n))
        logits, allowed = pair_logits(case, mode, rows)
        allowed = np.broadcast_to(allowed[:, None, :], logits.shape)
        logits = np.where(allowed, logits, -np.inf)
        peak = logits.max(axis=-1, keepdims=True)
        peak = np.where(np.isfinite(peak), peak, 0)
        p = np.exp(logits - peak)
        z = p.sum(axis=-1)
        live = z > 0
        out[rows] = np.einsum("rhn,nhd->rhd", p, v) / np.where(live, z, 1)[..., None]
        with np.errstate(divide="ignore"):
            lse[rows] = np.log(z) + peak[..., 0]
    return AttentionResult(out, lse)


@dataclass
class KvCache:
    """Append-only store of SPE-rotated keys and raw values.

    Earlier rows are never rewritten; growth copies the buffer into a larger
    one with identical bytes.
    """

    plan: PositionPlan
    cfg: RopeConfig
    partition: ChunkPartition
    heads: int
    head_dim: int
    dtype: np.dtype = np.dtype(np.float64)
    length: int = 0
    _keys: np.ndarray = field(default=None, repr=False)
    _values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._keys is None:
            self._keys = np.zeros((max(16, len(self.plan)), self.heads, self.head_dim), dtype=self.dtype)
            self._values = np.zeros_like(self._keys)

    @property
    def keys(self) -> np.ndarray:
        view = self._keys[: self.length]
        view.flags.writeable = False
        return view

    @property
    def values(self) -> np.ndarray:
        view = self._values[: self.length]
        view.flags.writeable = False
        return view

    def append(self, rotated_keys: np.ndarray, values: np.ndarray) -> None:
        m = len(rotated_keys)
        if self.length + m > len(self._keys):
            cap = max(2 * len(self._keys), self.length + m)
            for name in ("_keys", "_values"):
                old = getattr(self, name)
                grown = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
                grown[: self.length] = old[: self.length]
                setattr(self, name, grown)
        self._keys[self.length:self.length + m] = rotated_keys
        self._values[self.length:self.length + m] = values
        self.length += m


def prefill(case: AttentionCase) -> tuple[AttentionResult, KvCache]:
    """Run the full prefix through :func:`attend_split` and cache its keys and values."""
    if not case.causal or case.visual_bidirectional:
        raise DipeError("plan_mismatch", "incremental decoding requires a plain causal mask")
    result = attend_split(case)
    n, heads, d = case.keys.shape
    cache = KvCache(case.plan, case.cfg, case.partition, heads, d, case.dtype)
    k = mrope_rotate(case.keys, case.plan.spe[:, None, :], case.cfg, case.partition)
    cache.append(k, case.values)
    return result, cache


def decode_step(cache: KvCache, new_q, new_k, new_v, modality: Modality | str = Modality.TEXT):
    """Attend one new token over the cache, appending its key and value.

    The token is placed with :func:`extend_plan` semantics, so a text token
    after a text segment shares that segment's anchor. Returns the output row
    ``(heads, head_dim)`` and the (mutated) cache.
    """
    if cache.length != len(cache.plan):
        raise DipeError("plan_mismatch", f"cache holds {cache.length} tokens, plan has {len(cache.plan)}")
    try:
        modality = Modality(modality)
    except ValueError:
        raise DipeError("plan_mismatch", f"unknown modality {modality!r}") from None
    shape = (cache.heads, cache.head_dim)
    new_q, new_k, new_v = (np.asarray(a) for a in (new_q, new_k, new_v))
    if new_q.shape != shape or new_k.shape != shape or new_v.shape != shape:
        raise DipeError("dim_mismatch", f"new q/k/v must be {shape}")

    plan = extend_plan(cache.plan, 1, modality)
    spe, ape = plan.spe[-1], plan.ape[-1]
    cache.append(mrope_rotate(new_k[None], spe, cache.cfg, cache.partition), new_v[None])
    cache.plan = plan

    q_spe = mrope_rotate(new_q[None], spe, cache.cfg, cache.partition).astype(cache.dtype, copy=False)
    q_ape = mrope_rotate(new_q[None], ape, cache.cfg, cache.partition).astype(cache.dtype, copy=False)
    same = (plan.is_visual == (modality is Modality.VISUAL))[None, :]
    scale = 1.0 / np.sqrt(cache.head_dim)
    o_intra, l_intra = masked_attention(q_spe, cache.keys, cache.values, same, scale)
    o_inter, l_inter = masked_attention(q_ape, cache.keys, cache.values, ~same, scale)
    out, _, _ = merge_lse(o_intra, l_intra, o_inter, l_inter)
    return out[0], cache


def random_case(
    segments,
    heads: int = 1,
    cfg: RopeConfig | None = None,
    seed: int = 0,
    dtype=np.float64,
    causal: bool = True,
    mode: str = "mrope",
) -> AttentionCase:
    """Seeded Gaussian q/k/v over a plan built from ``segments`` (list or inline string)."""
    if isinstance(segments, str):
        segments = parse_segments(segments)
    cfg = cfg or RopeConfig(48)
    plan = build_plan(segments, mode)
    rng = np.random.default_rng(seed)
    shape = (len(plan), heads, cfg.head_dim)
    q, k, v = (rng.standard_normal(shape).astype(dtype) for _ in range(3))
    return AttentionCase(q, k, v, plan, cfg, causal=causal)


def case_to_dict(case: AttentionCase) -> dict:
    return {
        "head_dim": case.cfg.head_dim,
        "base": case.cfg.base,
        "partition": list(case.partition.pairs),
        "causal": case.causal,
        "visual_bidirectional": case.visual_bidirectional,
        "plan": plan_to_dict(case.plan),
        "queries": case.queries.tolist(),
        "keys": case.keys.tolist(),
        "values": case.values.tolist(),
    }


def case_from_dict(doc: dict, dtype=np.float64) -> AttentionCase:
    """Accepts either a full ``plan`` or a ``segments`` list / inline string."""
    try:
        cfg = RopeConfig(int(doc["head_dim"]), float(doc.get("base", 10000.0)))
        part = ChunkPartition(*doc["partition"]) if "partition" in doc else None
        if "plan" in doc:
            plan = plan_from_dict(doc["plan"])
        else:
            segs = doc["segments"]
            segs = parse_segments(segs) if isinstance(segs, str) else segments_from_json(segs)
            plan = build_plan(segs, doc.get("mode", "mrope"))
        arrays = [np.array(doc[name], dtype=dtype) for name in ("queries", "keys", "values")]
        return AttentionCase(*arrays, plan, cfg, part, bool(doc.get("causal", True)),
                             bool(doc.get("visual_bidirectional", False)))
    except DipeError as exc:
        if exc.code == "parse_error":
            raise
        raise DipeError("parse_error", str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise DipeError("parse_error", f"invalid case document: {exc!r}") from exc


def case_from_json(text: str, dtype=np.float64) -> AttentionCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DipeError("parse_error", f"{exc.msg} at byte {offset}", offset=offset) from exc
    if not isinstance(doc, dict):
        raise DipeError("parse_error", "case document must be a JSON object", offset=0)
    return case_from_dict(doc, dtype)


def result_to_dict(result: AttentionResult) -> dict:
    """JSON-ready ``{output, lse, alpha}``; JSON has no -inf, so empty rows carry null."""
    return {
        "output": _nested(result.output),
        "lse": _nested(result.lse),
        "alpha": None if result.alpha is None else _nested(result.alpha),
    }


def _nested(a: np.ndarray):
    def walk(x):
        if isinstance(x, list):
            return [walk(y) for y in x]
        return x if np.isfinite(x) else None

    return walk(np.asarray(a, dtype=np.float64).tolist())
