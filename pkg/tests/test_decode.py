import numpy as np
import pytest

from dipe.attention import AttentionCase, attend_split, build_masks, decode_step, prefill
from dipe.errors import DipeError
from dipe.plan import Image, Modality, Text, build_plan, extend_plan
from dipe.rope import RopeConfig

CFG = RopeConfig(24)


def full_case(rng, segments, heads=2):
    plan = build_plan(segments)
    shape = (len(plan), heads, CFG.head_dim)
    q, k, v = (rng.standard_normal(shape) for _ in range(3))
    return AttentionCase(q, k, v, plan, CFG)


def sliced(case, n, segments):
    return AttentionCase(case.queries[:n], case.keys[:n], case.values[:n], build_plan(segments), CFG)


def test_decode_matches_full_recompute(rng):
    case = full_case(rng, [Text(3), Image(2, 3), Text(10)])
    full = attend_split(case)
    result, cache = prefill(sliced(case, 12, [Text(3), Image(2, 3), Text(3)]))
    np.testing.assert_allclose(result.output, full.output[:12], atol=1e-12)
    for t in range(12, 19):
        out, cache = decode_step(cache, case.queries[t], case.keys[t], case.values[t], Modality.TEXT)
        np.testing.assert_allclose(out, full.output[t], atol=1e-9)
    assert cache.plan == case.plan


def test_cached_bytes_untouched(rng):
    case = full_case(rng, [Image(2, 2), Text(40)])
    _, cache = prefill(sliced(case, 6, [Image(2, 2), Text(2)]))
    for t in range(6, 44):
        before = cache.keys.tobytes(), cache.values.tobytes()
        decode_step(cache, case.queries[t], case.keys[t], case.values[t], "text")
        assert cache.keys[:t].tobytes() == before[0]
        assert cache.values[:t].tobytes() == before[1]


def test_first_text_token_after_image_prefix(rng):
    case = full_case(rng, [Image(2, 2), Text(2)])
    _, cache = prefill(sliced(case, 4, [Image(2, 2)]))
    out, cache = decode_step(cache, case.queries[4], case.keys[4], case.values[4], "text")
    masks = build_masks(cache.plan)
    # the only same-modality key is the token itself; everything else goes through the inter kernel
    assert np.flatnonzero(masks.intra[4]).tolist() == [4]
    assert np.flatnonzero(masks.inter[4]).tolist() == [0, 1, 2, 3]
    np.testing.assert_allclose(out, attend_split(sliced(case, 5, [Image(2, 2), Text(1)])).output[4], atol=1e-12)
    # a fresh text segment is anchored at max(spe) + 1
    assert cache.plan.ape[4].tolist() == [2, 2, 2]


def test_decode_new_visual_segment(rng):
    case = full_case(rng, [Text(4), Image(1, 2)])
    _, cache = prefill(sliced(case, 4, [Text(4)]))
    for t in (4, 5):
        out, cache = decode_step(cache, case.queries[t], case.keys[t], case.values[t], "visual")
        np.testing.assert_allclose(out, attend_split(case).output[t], atol=1e-9)


def test_cache_growth_preserves_rows(rng):
    case = full_case(rng, [Text(1)])
    _, cache = prefill(case)
    first = cache.keys[:1].copy()
    for _ in range(40):
        decode_step(cache, *(rng.standard_normal((2, 24)) for _ in range(3)), "text")
    np.testing.assert_array_equal(cache.keys[:1], first)
    assert cache.length == len(cache.plan) == 41


def test_plan_mismatch(rng):
    case = full_case(rng, [Text(4)])
    _, cache = prefill(case)
    cache.plan = extend_plan(cache.plan, 1, "text")
    x = np.zeros((2, 24))
    with pytest.raises(DipeError) as exc:
        decode_step(cache, x, x, x, "text")
    assert exc.value.code == "plan_mismatch"


def test_bad_modality_and_shape(rng):
    _, cache = prefill(full_case(rng, [Text(2)]))
    x = np.zeros((2, 24))
    with pytest.raises(DipeError) as exc:
        decode_step(cache, x, x, x, "audio")
    assert exc.value.code == "plan_mismatch"
    with pytest.raises(DipeError) as exc:
        decode_step(cache, np.zeros((2, 12)), x, x, "text")
    assert exc.value.code == "dim_mismatch"
