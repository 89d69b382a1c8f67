import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from denoisegan import data as D
from denoisegan.data import (CAR, ImageFormatError, LabelMap, add_noise, decode_one_hot, encode_input,
                             extract_instance_map, generate_scene, jitter_crop, one_hot_encode, read_image,
                             read_manifest, read_pgm, read_ppm_bytes, resize_nearest, scene_spec_for, to_pixels,
                             to_unit, write_image, write_pgm, write_ppm_bytes)
from denoisegan.rng import Rng

label_maps = hnp.arrays(np.int64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 5))


def test_one_hot_small_example():
    enc = one_hot_encode(np.array([[0, 1], [1, 2]]), 3)
    assert enc.shape == (3, 2, 2)
    assert np.all(enc.sum(axis=0) == 1)
    assert enc[1].tolist() == [[0, 1], [1, 0]]


def test_one_hot_uniform_map():
    enc = one_hot_encode(np.zeros((3, 4), int), 4)
    assert np.all(enc[0] == 1) and not enc[1:].any()


@given(label_maps)
def test_one_hot_partition_and_round_trip(ids):
    enc = one_hot_encode(ids, 6)
    assert np.all(enc.sum(axis=0) == 1)
    assert set(np.unique(enc)) <= {0.0, 1.0}
    assert np.array_equal(decode_one_hot(enc), ids)


def test_one_hot_reports_bad_pixel():
    ids = np.zeros((3, 3), int)
    ids[2, 1] = 7
    with pytest.raises(ValueError, match=r"row=2, col=1"):
        one_hot_encode(ids, 4)


def test_instance_map_brute_force():
    ids = np.zeros((3, 3), int)
    ids[0, 0] = ids[1, 1] = CAR
    inst = extract_instance_map(LabelMap(ids))
    assert inst.shape == (1, 3, 3)
    assert {(y, x) for y in range(3) for x in range(3) if inst[0, y, x] == 1} == {(0, 0), (1, 1)}
    assert not extract_instance_map(LabelMap(np.zeros((3, 3), int))).any()


@given(label_maps.map(lambda a: a % 4))
def test_instance_channel_is_subset_of_class_channel(ids):
    lm = LabelMap(ids)
    inst = extract_instance_map(lm)[0]
    car = one_hot_encode(lm, 4)[CAR]
    assert np.array_equal(inst * car, inst)
    for y, x in itertools.product(range(ids.shape[0]), range(ids.shape[1])):
        assert inst[y, x] == (1.0 if ids[y, x] == CAR else 0.0)


def test_instance_map_empty_complex_set_warns():
    with pytest.warns(UserWarning):
        out = extract_instance_map(LabelMap(np.zeros((2, 2), int)), set())
    assert out.shape == (0, 2, 2)


def test_encode_input_channel_count():
    lm = LabelMap(np.zeros((4, 4), int))
    assert encode_input(lm).shape == (5, 4, 4)
    assert encode_input(lm, use_instance=False).shape == (4, 4, 4)


def test_add_noise_sigma_zero_is_identity():
    x = np.arange(12, dtype=np.float32).reshape(3, 2, 2)
    assert np.array_equal(add_noise(x, 0.0, Rng(1)), x)


def test_add_noise_statistics():
    x = np.zeros(1_000_000, np.float32)
    z = add_noise(x, 0.1, Rng(2024)).astype(np.float64)
    assert abs(z.mean()) <= 0.001
    assert abs(z.std() - 0.1) <= 0.002


def test_add_noise_seeds_differ_and_negative_sigma():
    x = np.zeros(10, np.float32)
    assert not np.array_equal(add_noise(x, 0.1, Rng(1)), add_noise(x, 0.1, Rng(2)))
    with pytest.raises(ValueError):
        add_noise(x, -0.1, Rng(1))


def test_jitter_crop_shapes_and_offset_oracle():
    inp = np.arange(2 * 8 * 8, dtype=np.float32).reshape(2, 8, 8)
    tgt = inp[:1] * 10
    a, b = jitter_crop(inp, tgt, 8, 9, Rng(0))
    assert a.shape == (2, 8, 8) and b.shape == (1, 8, 8)
    a, b = jitter_crop(inp, tgt, 8, 9, offset=(0, 0))
    # nearest neighbour: enlarged index i reads source floor(i * 8 / 9)
    src = [(i * 8) // 9 for i in range(8)]
    assert np.array_equal(a, inp[:, src][:, :, src])
    assert np.array_equal(b, tgt[:, src][:, :, src])


def test_jitter_crop_identity_when_not_enlarged():
    inp = Rng(0).normal(3 * 16).reshape(3, 4, 4).astype(np.float32)
    a, b = jitter_crop(inp, inp[:1], 4, 4, Rng(5))
    assert np.array_equal(a, inp) and np.array_equal(b, inp[:1])
    with pytest.raises(ValueError):
        jitter_crop(inp, inp, 4, 3, Rng(0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_jitter_crop_keeps_layout_and_colour_aligned(seed):
    lm, target = generate_scene(scene_spec_for(seed, 0, 32, 0.5))
    x, y = jitter_crop(one_hot_encode(lm, 4), target, 32, 36, Rng(seed))
    ids = decode_one_hot(x)
    # background, road and building are flat palette colours; check them pixel by pixel
    for c in (D.BACKGROUND, D.ROAD, D.BUILDING):
        sel = ids == c
        assert np.all(y[:, sel] == np.array(D.PALETTE[c], np.uint8)[:, None])


def test_resize_nearest_upsample():
    x = np.array([[1, 2], [3, 4]])
    assert resize_nearest(x, 4).tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_zero_object_scene_is_background():
    lm, target = generate_scene(D.SyntheticSceneSpec(seed=1, num_objects=0, size=16))
    assert np.all(lm.ids == D.BACKGROUND)
    assert np.all(target == np.array(D.PALETTE[D.BACKGROUND], np.uint8)[:, None, None])


def test_scene_generation_is_deterministic():
    a = generate_scene(scene_spec_for(42, 3, 64, 0.5))
    b = generate_scene(scene_spec_for(42, 3, 64, 0.5))
    assert np.array_equal(a[0].ids, b[0].ids) and np.array_equal(a[1], b[1])
    c = generate_scene(scene_spec_for(42, 4, 64, 0.5))
    assert not np.array_equal(a[1], c[1])


def test_overlap_rate_oracle():
    overlapping = 0
    for i in range(100):
        lm, _ = generate_scene(scene_spec_for(42, i, 64, 0.5))
        masks = lm.car_masks
        if any((m1 & m2).any() for m1, m2 in itertools.combinations(masks, 2)):
            overlapping += 1
    assert overlapping >= 40


def test_car_pixels_in_layout_match_masks():
    lm, _ = generate_scene(scene_spec_for(7, 0, 64, 0.5))
    union = np.zeros_like(lm.ids, bool)
    for m in lm.car_masks:
        union |= m
    assert np.array_equal(union, lm.ids == CAR)


def test_pixel_mapping_oracles():
    assert to_unit(np.array([128], np.uint8))[0] == pytest.approx(0.00392, abs=1e-5)
    assert to_unit(np.array([0, 255], np.uint8)).tolist() == [-1.0, 1.0]
    v = np.arange(256, dtype=np.uint8)
    assert np.array_equal(to_pixels(to_unit(v)), v)
    # round half up: x = 0 maps to 127.5 exactly and goes to 128
    assert to_pixels(np.array([0.0]))[0] == 128


def test_ppm_round_trip_and_black(tmp_path):
    px = Rng(0).integers(0, 256, 3 * 5 * 7).reshape(3, 5, 7).astype(np.uint8)
    write_ppm_bytes(tmp_path / "a.ppm", px)
    assert np.array_equal(read_ppm_bytes(tmp_path / "a.ppm"), px)
    write_image(tmp_path / "b.ppm", to_unit(px))
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    write_ppm_bytes(tmp_path / "black.ppm", np.zeros((3, 2, 2), np.uint8))
    assert np.all(read_image(tmp_path / "black.ppm") == -1)


def test_ppm_header_with_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6 # a comment\n1 1\n255\n\x01\x02\x03")
    assert read_ppm_bytes(tmp_path / "c.ppm").ravel().tolist() == [1, 2, 3]


@pytest.mark.parametrize("raw,offset", [(b"P3\n1 1\n255\n...", "byte 0"), (b"P6\n1 x\n255\n...", "byte 5"),
                                        (b"P6\n1 1\n255\n\x01", "after byte 11"), (b"P6\n1 1", "byte 6")])
def test_malformed_headers_report_byte_offset(tmp_path, raw, offset):
    (tmp_path / "bad.ppm").write_bytes(raw)
    with pytest.raises(ImageFormatError, match=offset):
        read_ppm_bytes(tmp_path / "bad.ppm")


def test_pgm_round_trip(tmp_path):
    ids = np.array([[0, 1, 2], [3, 0, 1]])
    write_pgm(tmp_path / "l.pgm", ids)
    assert np.array_equal(read_pgm(tmp_path / "l.pgm"), ids)


def test_synthesized_corpus(tmp_path):
    paths = D.synthesize_dataset(tmp_path, 42, 3, size=16, heldout=2)
    assert set(paths) == {"manifest.tsv", "heldout.tsv"}
    entries = read_manifest(paths["manifest.tsv"])
    assert len(entries) == 3 and len(read_manifest(paths["heldout.tsv"])) == 2
    assert D.read_class_table(tmp_path / "classes.txt") == D.CLASS_NAMES
    corpus = D.load_corpus(paths["manifest.tsv"])
    assert corpus.inputs.shape == (3, 5, 16, 16) and corpus.targets.shape == (3, 3, 16, 16)
    lm, target = generate_scene(scene_spec_for(42, 1, 16, 0.5))
    assert np.array_equal(corpus.targets[1], to_unit(target))
    assert entries[1].seed == scene_spec_for(42, 1, 16, 0.5).seed


def test_empty_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text(D.MANIFEST_HEADER + "\n", encoding="utf-8")
    assert read_manifest(tmp_path / "m.tsv") == []
    assert D.load_corpus(tmp_path / "m.tsv").paths == []


def test_bad_manifest_line(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tb\n", encoding="utf-8")
    with pytest.raises(ValueError, match="m.tsv:1"):
        read_manifest(tmp_path / "m.tsv")
