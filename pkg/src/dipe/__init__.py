"""Distance-invariant rotary position encoding for interleaved text and images."""

from dipe.attention import (
    AttentionCase,
    AttentionResult,
    KvCache,
    MaskPair,
    attend,
    attend_reference,
    attend_split,
    build_masks,
    decode_step,
    merge_lse,
    prefill,
    softmax_rows_with_lse,
)
from dipe.errors import DipeError
from dipe.mrope import (
    ChunkPartition,
    PositionTuple,
    default_partition,
    mrope_image_indices,
    mrope_rotate,
    mrope_text_indices,
    vanilla_rope_indices,
)
from dipe.plan import (
    Image,
    Modality,
    ModalitySegment,
    PositionPlan,
    Text,
    build_plan,
    extend_plan,
    parse_segments,
    plan_from_json,
    plan_to_json,
)
from dipe.probe import ProbeConfig, ProbeReport, report_to_csv, run_probe, synth_sequence
from dipe.rope import RopeConfig, decay_bound, frequencies, rotate

__version__ = "0.1.0"
