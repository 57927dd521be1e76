import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqdiff.conditioning import (
    AvailabilityMask,
    ConditioningOptions,
    all_masks,
    assemble_batch,
    assemble_input,
    decode_mask,
    encode_mask,
    masks_with_missing,
    split_output,
    valid_masks,
)
from freqdiff.errors import ContractError, InputError, TaskError
from freqdiff.frequency import build_guidance, make_kernel
from freqdiff.phantoms import MODALITIES, generate_sample
from freqdiff.schedule import Phase, make_schedule

S = make_schedule(200)
K = make_kernel(5)


def _noisy(mask, shape, rng):
    return {m: rng.standard_normal(shape) for m in mask.missing}


def test_encode_examples():
    assert encode_mask({"T2", "FLAIR", "T1ce"}).bits == (0, 1, 1, 1)
    assert encode_mask(set()).bits == (0, 0, 0, 0)
    with pytest.raises(InputError):
        encode_mask({"PD"})


def test_encode_decode_roundtrip_all_subsets():
    for r in range(5):
        for subset in itertools.combinations(MODALITIES, r):
            assert decode_mask(encode_mask(subset)) == set(subset)


def test_mask_strings():
    m = AvailabilityMask.parse("0111")
    assert str(m) == "0111" and m.missing == (0,) and m.available == (1, 2, 3)
    for bad in ("011", "01a1", "11111", ""):
        with pytest.raises(InputError):
            AvailabilityMask.parse(bad)


def test_mask_counts():
    assert len(all_masks()) == 16
    assert len(valid_masks()) == 14
    assert [len(masks_with_missing(k)) for k in (1, 2, 3)] == [4, 6, 4]
    assert {str(m) for m in masks_with_missing(1)} == {"0111", "1011", "1101", "1110"}


def test_degenerate_masks_are_task_errors(rng):
    sample = generate_sample(0, 16)
    g = build_guidance(sample, (1, 0, 0, 0), K)
    for bits in ((1, 1, 1, 1), (0, 0, 0, 0)):
        with pytest.raises(TaskError):
            assemble_input(sample, AvailabilityMask(bits), {}, g, 5, S)


def test_worked_example_two_missing(rng):
    sample = generate_sample(1, 16)
    mask = AvailabilityMask((0, 0, 1, 1))
    g = build_guidance(sample, mask, K)
    noisy = _noisy(mask, (16, 16), rng)
    top = assemble_input(sample, mask, noisy, g, 200, S)
    assert top.channels.shape == (5, 16, 16) and top.phase is Phase.COARSE
    assert np.array_equal(top.channels[0], noisy[0])
    assert np.array_equal(top.channels[1], noisy[1])
    assert np.array_equal(top.channels[2], sample.modalities[2])
    assert np.array_equal(top.channels[3], sample.modalities[3])
    assert np.array_equal(top.channels[4], g.lf_image)
    bottom = assemble_input(sample, mask, noisy, g, 1, S)
    assert np.array_equal(bottom.channels[4], g.hf_image)
    assert np.array_equal(bottom.channels[:4], top.channels[:4])


def test_noisy_entries_must_match_missing(rng):
    sample = generate_sample(1, 16)
    mask = AvailabilityMask((0, 1, 1, 1))
    g = build_guidance(sample, mask, K)
    with pytest.raises(ContractError):
        assemble_input(sample, mask, {}, g, 3, S)
    with pytest.raises(ContractError):
        assemble_input(sample, mask, {0: np.zeros((16, 16)), 1: np.zeros((16, 16))}, g, 3, S)


def test_assembly_and_split_exhaustive(rng):
    sample = generate_sample(2, 16)
    mismatches = 0
    for mask in valid_masks():
        g = build_guidance(sample, mask, K)
        noisy = _noisy(mask, (16, 16), rng)
        guides = set()
        for t in range(S.T, 0, -1):
            stack = assemble_input(sample, mask, noisy, g, t, S)
            for c in range(4):
                want = sample.modalities[c] if mask.bits[c] else noisy[c]
                mismatches += not np.array_equal(stack.channels[c], want)
            want_guide = g.lf_image if t > S.T // 2 else g.hf_image
            mismatches += not np.array_equal(stack.channels[4], want_guide)
            guides.add(stack.channels[4].tobytes())
        assert len(guides) <= 2
        out = rng.standard_normal((4, 16, 16))
        kept = split_output(out, mask, sample)
        for c in range(4):
            want = out[c] if not mask.bits[c] else sample.modalities[c]
            mismatches += not np.array_equal(kept[c], want)
        survivors = {c for c in range(4) if np.array_equal(kept[c], out[c])}
        mismatches += survivors != set(mask.missing)
    assert mismatches == 0


def test_split_output_examples(rng):
    sample = generate_sample(4, 8)
    out = rng.standard_normal((4, 8, 8))
    kept = split_output(out, AvailabilityMask((1, 1, 1, 0)), sample)
    assert np.array_equal(kept[3], out[3]) and np.array_equal(kept[:3], sample.modalities[:3])
    kept = split_output(out, AvailabilityMask((0, 0, 0, 1)), sample)
    assert np.array_equal(kept[:3], out[:3]) and np.array_equal(kept[3], sample.modalities[3])
    with pytest.raises(ContractError):
        split_output(out[:3], AvailabilityMask((0, 0, 0, 1)), sample)


@given(st.sampled_from(valid_masks()), st.integers(1, 200), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_split_after_assemble_preserves_sources(mask, t, seed):
    rng = np.random.default_rng(seed)
    sample = generate_sample(seed % 1000, 8)
    g = build_guidance(sample, mask, K)
    stack = assemble_input(sample, mask, _noisy(mask, (8, 8), rng), g, t, S)
    kept = split_output(stack.channels[:4], mask, sample)
    assert np.array_equal(kept[list(mask.available)], sample.modalities[list(mask.available)])


def test_batch_assembly_matches_single(rng):
    samples = [generate_sample(i, 8) for i in range(3)]
    masks = [AvailabilityMask.parse(s) for s in ("0111", "1000", "1010")]
    images = np.stack([s.modalities for s in samples]).astype(np.float64)
    states = rng.standard_normal(images.shape)
    t = 150
    gs = [build_guidance(s, m, K) for s, m in zip(samples, masks)]
    batch = assemble_batch(images, np.array([m.bits for m in masks]), states, np.stack([g.lf_image for g in gs]))
    for b, (s, m, g) in enumerate(zip(samples, masks, gs)):
        single = assemble_input(s, m, {c: states[b, c] for c in m.missing}, g, t, S)
        assert np.array_equal(batch[b], single.channels)


def test_options_switch_channels(rng):
    sample = generate_sample(6, 8)
    mask = AvailabilityMask((1, 0, 1, 0))
    g = build_guidance(sample, mask, K)
    noisy = _noisy(mask, (8, 8), rng)
    none = assemble_input(sample, mask, noisy, g, 200, S, ConditioningOptions(guidance="none"))
    assert not none.channels[4].any()
    hf = assemble_input(sample, mask, noisy, g, 200, S, ConditioningOptions(guidance="hf"))
    assert np.array_equal(hf.channels[4], g.hf_image)
    nosrc = assemble_input(sample, mask, noisy, g, 1, S, ConditioningOptions(use_sources=False))
    assert not nosrc.channels[[0, 2]].any()
    with pytest.raises(ContractError):
        ConditioningOptions(guidance="mid")
