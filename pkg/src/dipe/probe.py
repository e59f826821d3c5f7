"""Synthetic visual-fading probe.

Builds ``[image patches, distractor text, question text]`` sequences with
seeded Gaussian embeddings, pushes them through a small stack of
attention + residual layers with random projections, and records how much
attention the question tokens pay to the image as the distractor grows.

Embedding rows are ``shared_mean + noise`` with both parts drawn at scale
``1/sqrt(head_dim)``. The shared mean and the tied query/key projection give
queries and keys a common direction, so a query-key logit is large and
positive at zero offset and shrinks as rotary phases drift apart with
distance. Without that alignment random logits carry no distance signal.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from dipe.attention import AttentionCase, attend, attention_probs
from dipe.errors import DipeError
from dipe.mrope import default_partition
from dipe.plan import Image, PositionPlan, Text, build_plan
from dipe.rope import RopeConfig

MODES = ("vanilla", "mrope", "dipe")
CSV_HEADER = "mode,distractor_len,layer,visual_mass,per_visual_token_mass,mean_inter_logit"

# query/key projection gain; sets the zero-offset logit to a few units
QK_GAIN = 0.75


@dataclass(frozen=True)
class ProbeConfig:
    seed: int = 0
    layers: int = 2
    heads: int = 2
    head_dim: int = 48
    base: float = 10000.0
    image_grid: tuple[int, int] = (4, 4)
    question_len: int = 8
    distractor_lengths: tuple[int, ...] = (0, 64, 256, 1024, 4096)
    modes: tuple[str, ...] = MODES
    intra_image_mask: str = "causal"
    precision: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "distractor_lengths", tuple(int(x) for x in self.distractor_lengths))
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "image_grid", tuple(self.image_grid))
        if self.layers < 1 or self.heads < 1 or self.question_len < 1:
            raise DipeError("bad_config", "layers, heads and question_len must be positive")
        if not self.distractor_lengths or list(self.distractor_lengths) != sorted(self.distractor_lengths):
            raise DipeError("bad_config", "distractor_lengths must be non-empty and sorted ascending")
        if min(self.distractor_lengths) < 0:
            raise DipeError("bad_config", "distractor lengths must be nonnegative")
        if not self.modes or any(m not in MODES for m in self.modes):
            raise DipeError("bad_config", f"modes must be a non-empty subset of {MODES}")
        if self.intra_image_mask not in ("causal", "full"):
            raise DipeError("bad_config", "intra_image_mask must be 'causal' or 'full'")
        if self.precision not in ("f64", "f32"):
            raise DipeError("bad_config", "precision must be 'f64' or 'f32'")
        RopeConfig(self.head_dim, self.base)

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.base)

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def n_visual(self) -> int:
        return self.image_grid[0] * self.image_grid[1]

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass(frozen=True)
class ProbeRow:
    mode: str
    distractor_len: int
    layer: int
    visual_mass: float
    per_visual_token_mass: float
    mean_inter_logit: float


@dataclass
class ProbeReport:
    config: ProbeConfig
    rows: list[ProbeRow]
    # (mode, distractor_len, layer) -> question x heads x visual logits
    inter_logits: dict = field(default_factory=dict, repr=False)

    def row(self, mode: str, distractor_len: int, layer: int) -> ProbeRow:
        for r in self.rows:
            if (r.mode, r.distractor_len, r.layer) == (mode, distractor_len, layer):
                return r
        raise KeyError((mode, distractor_len, layer))

    def layer_means(self) -> list[dict]:
        """Per (mode, length) averages over layers."""
        out = []
        for mode in self.config.modes:
            for length in self.config.distractor_lengths:
                cell = [r for r in self.rows if r.mode == mode and r.distractor_len == length]
                out.append({
                    "mode": mode,
                    "distractor_len": length,
                    "visual_mass": float(np.mean([r.visual_mass for r in cell])),
                    "per_visual_token_mass": float(np.mean([r.per_visual_token_mass for r in cell])),
                    "mean_inter_logit": float(np.mean([r.mean_inter_logit for r in cell])),
                })
        return out


def _embedding_tables(cfg: ProbeConfig):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    scale = 1.0 / np.sqrt(cfg.head_dim)
    d = cfg.model_dim
    mean = rng.standard_normal(d) * scale
    visual = mean + rng.standard_normal((cfg.n_visual, d)) * scale
    question = mean + rng.standard_normal((cfg.question_len, d)) * scale
    # one pool for the longest distractor; shorter ones take its prefix
    distractor = mean + rng.standard_normal((max(cfg.distractor_lengths), d)) * scale
    return visual, distractor, question


def _layer_weights(cfg: ProbeConfig):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    d = cfg.model_dim
    layers = []
    for _ in range(cfg.layers):
        w_qk = rng.standard_normal((d, d)) * (QK_GAIN * np.sqrt(cfg.head_dim / d))
        w_v = rng.standard_normal((d, d)) / np.sqrt(d)
        w_o = rng.standard_normal((d, d)) / np.sqrt(d)
        layers.append((w_qk, w_v, w_o))
    return layers


def synth_sequence(cfg: ProbeConfig, distractor_len: int, mode: str = "mrope") -> tuple[np.ndarray, PositionPlan]:
    """Embeddings ``(tokens, model_dim)`` and plan for one distractor length.

    Image and question rows are identical for every length, and distractor
    rows for a shorter length are a prefix of those for a longer one.
    """
    if distractor_len not in cfg.distractor_lengths:
        raise DipeError("bad_config", f"distractor length {distractor_len} not in {cfg.distractor_lengths}")
    visual, distractor, question = _embedding_tables(cfg)
    emb = np.concatenate([visual, distractor[:distractor_len], question]).astype(cfg.dtype)
    plan_mode = "vanilla" if mode == "vanilla" else "mrope"
    plan = build_plan([Image(*cfg.image_grid), Text(distractor_len + cfg.question_len)], plan_mode)
    return emb, plan


def _run_cell(cfg: ProbeConfig, mode: str, length: int, weights):
    h, plan = synth_sequence(cfg, length, mode)
    n = len(plan)
    rope = cfg.rope
    part = default_partition(rope)
    attn_mode = "dipe" if mode == "dipe" else "baseline"
    vis = plan.is_visual
    q_rows = np.arange(n - cfg.question_len, n)
    rows, logit_mats = [], {}
    for layer, (w_qk, w_v, w_o) in enumerate(weights):
        qk = (h @ w_qk.astype(cfg.dtype)).reshape(n, cfg.heads, cfg.head_dim)
        v = (h @ w_v.astype(cfg.dtype)).reshape(n, cfg.heads, cfg.head_dim)
        case = AttentionCase(qk, qk, v, plan, rope, part, causal=True,
                             visual_bidirectional=cfg.intra_image_mask == "full")
        probs, logits, _ = attention_probs(case, attn_mode, q_rows)
        inter = logits[:, :, vis]
        visual_mass = float(probs[:, :, vis].sum(axis=-1).mean(dtype=np.float64))
        rows.append(ProbeRow(mode, length, layer, visual_mass, visual_mass / cfg.n_visual,
                             float(inter.mean(dtype=np.float64))))
        logit_mats[(mode, length, layer)] = inter
        if layer + 1 < cfg.layers:
            out = attend(case, attn_mode).output
            h = h + out.reshape(n, cfg.model_dim) @ w_o.astype(cfg.dtype)
    return rows, logit_mats


def run_probe(cfg: ProbeConfig | None = None) -> ProbeReport:
    """Sweep every (mode, distractor length) cell; deterministic for a fixed seed."""
    cfg = cfg or ProbeConfig()
    weights = _layer_weights(cfg)
    report = ProbeReport(cfg, [])
    for mode in cfg.modes:
        for length in cfg.distractor_lengths:
            rows, mats = _run_cell(cfg, mode, length, weights)
            report.rows.extend(rows)
            report.inter_logits.update(mats)
    return report


def _fmt(x: float) -> str:
    return format(x, ".12g")


def report_to_csv(report: ProbeReport) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    for r in report.rows:
        writer.writerow([r.mode, r.distractor_len, r.layer, _fmt(r.visual_mass),
                         _fmt(r.per_visual_token_mass), _fmt(r.mean_inter_logit)])
    return buf.getvalue()


def report_to_json(report: ProbeReport, indent: int | None = 2) -> str:
    cfg = asdict(report.config)
    return json.dumps(
        {"config": cfg, "rows": [asdict(r) for r in report.rows], "layer_means": report.layer_means()},
        indent=indent,
    )
