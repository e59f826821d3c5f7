"""Sequential and anchored position plans for interleaved text/visual inputs.

Every token gets two position triples:

* ``spe``: the MRoPE (or 1D RoPE) index, used for keys and same-modality queries.
* ``ape``: the first ``spe`` triple of the token's modality segment, used when
  the token queries keys of the other modality.

Segments are maximal same-modality runs; adjacent inputs of one modality are
merged before planning. Adjacent images keep their own grid indexing but
share the run's anchor.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from dipe.errors import DipeError
from dipe.mrope import PositionTuple, mrope_image_indices, mrope_text_indices, vanilla_rope_indices


class Modality(str, enum.Enum):
    TEXT = "text"
    VISUAL = "visual"


PLAN_MODES = ("mrope", "vanilla")


@dataclass(frozen=True)
class ModalitySegment:
    modality: Modality
    length: int
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.length < 1:
            raise DipeError("bad_grid", f"segment length must be positive, got {self.length}")
        if self.modality is Modality.VISUAL:
            if self.grid is None:
                raise DipeError("bad_grid", "visual segment needs a (rows, cols) grid")
            rows, cols = self.grid
            if rows < 1 or cols < 1 or rows * cols != self.length:
                raise DipeError("bad_grid", f"grid {rows}x{cols} does not cover {self.length} tokens")
            object.__setattr__(self, "grid", (int(rows), int(cols)))
        elif self.grid is not None:
            raise DipeError("bad_grid", "text segments carry no grid")


def Text(length: int) -> ModalitySegment:
    return ModalitySegment(Modality.TEXT, length)


def Image(rows: int, cols: int) -> ModalitySegment:
    return ModalitySegment(Modality.VISUAL, rows * cols, (rows, cols))


class SegmentSpan(NamedTuple):
    start: int
    end: int  # exclusive
    modality: Modality


@dataclass(frozen=True, eq=False)
class PositionPlan:
    """Immutable per-token position triples; ``spe`` and ``ape`` are ``(n, 3)`` int arrays."""

    spe: np.ndarray
    ape: np.ndarray
    modality: tuple[Modality, ...]
    segment_spans: tuple[SegmentSpan, ...]
    mode: str = "mrope"

    def __post_init__(self):
        spe = np.array(self.spe, dtype=np.int64).reshape(-1, 3)
        ape = np.array(self.ape, dtype=np.int64).reshape(-1, 3)
        spe.flags.writeable = False
        ape.flags.writeable = False
        object.__setattr__(self, "spe", spe)
        object.__setattr__(self, "ape", ape)
        object.__setattr__(self, "modality", tuple(Modality(m) for m in self.modality))
        object.__setattr__(self, "segment_spans", tuple(SegmentSpan(s, e, Modality(m)) for s, e, m in self.segment_spans))
        n = len(self.modality)
        if len(spe) != n or len(ape) != n:
            raise DipeError("plan_mismatch", f"spe/ape/modality lengths differ: {len(spe)}, {len(ape)}, {n}")
        if self.mode not in PLAN_MODES:
            raise DipeError("plan_mismatch", f"unknown plan mode {self.mode!r}")
        cursor = 0
        for span in self.segment_spans:
            if span.start != cursor or span.end <= span.start:
                raise DipeError("plan_mismatch", f"segment spans must tile the sequence, got {span}")
            if any(m is not span.modality for m in self.modality[span.start:span.end]):
                raise DipeError("plan_mismatch", f"span {span} disagrees with token modalities")
            cursor = span.end
        if cursor != n:
            raise DipeError("plan_mismatch", f"segment spans cover {cursor} of {n} tokens")

    def __len__(self) -> int:
        return len(self.modality)

    def __eq__(self, other):
        if not isinstance(other, PositionPlan):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.modality == other.modality
            and self.segment_spans == other.segment_spans
            and np.array_equal(self.spe, other.spe)
            and np.array_equal(self.ape, other.ape)
        )

    __hash__ = None

    @cached_property
    def is_visual(self) -> np.ndarray:
        return np.array([m is Modality.VISUAL for m in self.modality], dtype=bool)

    @cached_property
    def segment_ids(self) -> np.ndarray:
        ids = np.empty(len(self), dtype=np.int64)
        for i, span in enumerate(self.segment_spans):
            ids[span.start:span.end] = i
        return ids

    @property
    def anchors(self) -> list[PositionTuple]:
        return [PositionTuple(*map(int, self.ape[span.start])) for span in self.segment_spans]

    def spe_tuples(self) -> list[PositionTuple]:
        return [PositionTuple(*map(int, row)) for row in self.spe]

    def ape_tuples(self) -> list[PositionTuple]:
        return [PositionTuple(*map(int, row)) for row in self.ape]


def _segment_indices(seg: ModalitySegment, start: int, mode: str) -> list[PositionTuple]:
    if mode == "vanilla":
        return vanilla_rope_indices(start, seg.length)
    if seg.modality is Modality.VISUAL:
        return mrope_image_indices(start, *seg.grid)
    return mrope_text_indices(start, seg.length)


def build_plan(segments: Sequence[ModalitySegment], mode: str = "mrope") -> PositionPlan:
    """Assign SPE and APE triples to a list of modality segments.

    >>> p = build_plan([Text(3), Image(2, 2), Text(2)])
    >>> p.anchors
    [PositionTuple(t=0, h=0, w=0), PositionTuple(t=3, h=3, w=3), PositionTuple(t=5, h=5, w=5)]
    """
    if mode not in PLAN_MODES:
        raise DipeError("bad_mode", f"mode must be one of {PLAN_MODES}, got {mode!r}")
    if not segments:
        raise DipeError("empty_sequence", "at least one segment is required")

    spe: list[PositionTuple] = []
    ape: list[PositionTuple] = []
    modality: list[Modality] = []
    spans: list[SegmentSpan] = []
    offset = 0
    for i, seg in enumerate(segments):
        joins_run = i > 0 and seg.modality is segments[i - 1].modality
        ids = _segment_indices(seg, offset, mode)
        if joins_run:
            anchor = ape[-1]
            spans[-1] = spans[-1]._replace(end=spans[-1].end + seg.length)
        else:
            anchor = ids[0]
            spans.append(SegmentSpan(len(spe), len(spe) + seg.length, seg.modality))
        spe.extend(ids)
        ape.extend([anchor] * seg.length)
        modality.extend([seg.modality] * seg.length)
        offset = max(max(t) for t in ids) + 1
    return PositionPlan(np.array(spe), np.array(ape), tuple(modality), tuple(spans), mode)


def extend_plan(plan: PositionPlan, new_tokens: int, modality: Modality | str) -> PositionPlan:
    """Append ``new_tokens`` tokens of ``modality`` (generation-time growth).

    Tokens matching the trailing segment's modality join it and share its
    anchor; text SPE continues from ``max(spe) + 1``, visual SPE (mrope mode)
    extends the last patch row. Otherwise a new segment opens at
    ``max(spe) + 1`` and anchors to its own first triple, a new visual
    segment being laid out as a single row of patches.
    """
    modality = Modality(modality)
    if new_tokens < 1:
        raise DipeError("bad_length", f"new_tokens must be positive, got {new_tokens}")
    if len(plan) == 0:
        raise DipeError("empty_sequence", "cannot extend an empty plan")
    start = int(plan.spe.max()) + 1
    last = plan.segment_spans[-1]
    spans = list(plan.segment_spans)
    if modality is last.modality:
        if modality is Modality.VISUAL and plan.mode == "mrope":
            t, h, w = (int(x) for x in plan.spe[-1])
            ids = np.array([(t, h, w + 1 + i) for i in range(new_tokens)])
        else:
            ids = np.array(mrope_text_indices(start, new_tokens))
        anchor = plan.ape[-1]
        spans[-1] = last._replace(end=last.end + new_tokens)
    else:
        if modality is Modality.VISUAL and plan.mode == "mrope":
            ids = np.array(mrope_image_indices(start, 1, new_tokens))
        else:
            ids = np.array(mrope_text_indices(start, new_tokens))
        anchor = ids[0]
        spans.append(SegmentSpan(last.end, last.end + new_tokens, modality))
    return PositionPlan(
        np.concatenate([plan.spe, ids]),
        np.concatenate([plan.ape, np.tile(anchor, (new_tokens, 1))]),
        plan.modality + (modality,) * new_tokens,
        tuple(spans),
        plan.mode,
    )


def plan_to_dict(plan: PositionPlan) -> dict:
    return {
        "mode": plan.mode,
        "spe": plan.spe.tolist(),
        "ape": plan.ape.tolist(),
        "modality": [m.value for m in plan.modality],
        "segments": [{"start": s.start, "end": s.end, "modality": s.modality.value} for s in plan.segment_spans],
    }


def plan_from_dict(doc: dict) -> PositionPlan:
    try:
        return PositionPlan(
            spe=_triples(doc["spe"], "spe"),
            ape=_triples(doc["ape"], "ape"),
            modality=tuple(Modality(m) for m in doc["modality"]),
            segment_spans=tuple(SegmentSpan(int(s["start"]), int(s["end"]), Modality(s["modality"]))
                                for s in doc["segments"]),
            mode=doc.get("mode", "mrope"),
        )
    except DipeError as exc:
        raise DipeError("parse_error", str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise DipeError("parse_error", f"invalid plan document: {exc!r}") from exc


def _triples(rows, name: str) -> np.ndarray:
    arr = np.array(rows, dtype=np.int64)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must be a list of [t, h, w] triples")
    if (arr < 0).any():
        raise ValueError(f"{name} has negative components")
    return arr


def plan_to_json(plan: PositionPlan, indent: int | None = None) -> str:
    return json.dumps(plan_to_dict(plan), indent=indent)


def plan_from_json(text: str) -> PositionPlan:
    """Parse a plan document; malformed JSON reports the failing byte offset."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DipeError("parse_error", f"{exc.msg} at byte {offset}", offset=offset) from exc
    if not isinstance(doc, dict):
        raise DipeError("parse_error", "plan document must be a JSON object", offset=0)
    return plan_from_dict(doc)


_SEGMENT_RE = re.compile(r"^(txt|text|img|image|visual):(?:(\d+)x(\d+)|(\d+))$")


def parse_segments(spec: str) -> list[ModalitySegment]:
    """Parse the inline grammar ``"txt:3,img:2x2,txt:2"``."""
    segments = []
    for item in spec.split(","):
        m = _SEGMENT_RE.match(item.strip())
        if m is None:
            raise DipeError("bad_segments", f"cannot parse segment {item!r}; expected txt:N or img:RxC")
        kind, rows, cols, count = m.groups()
        if kind in ("txt", "text"):
            if count is None:
                raise DipeError("bad_segments", f"text segment {item!r} takes a token count")
            segments.append(Text(int(count)))
        else:
            if rows is None:
                raise DipeError("bad_segments", f"image segment {item!r} takes a RxC grid")
            segments.append(Image(int(rows), int(cols)))
    return segments


def segments_from_json(doc) -> list[ModalitySegment]:
    """Canonical JSON form: ``[{"modality": "text", "length": 3}, {"modality": "visual", "grid": [2, 2]}]``."""
    out = []
    for item in doc:
        modality = Modality(item["modality"])
        if modality is Modality.VISUAL:
            rows, cols = item["grid"]
            out.append(ModalitySegment(modality, int(item.get("length", rows * cols)), (int(rows), int(cols))))
        else:
            out.append(ModalitySegment(modality, int(item["length"])))
    return out
