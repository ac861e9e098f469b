#!/usr/bin/env python3
"""
Tests for the synthetic corpus generator
"""

import json

import numpy as np
import pytest
from scipy import ndimage

from errors import FaceOutOfBoundsError, IdentityOverlapError
from imagecore import PoseBin, face_rect
from synth import (
    EYE_RADIUS,
    CorpusSpec,
    FaceModel,
    SyntheticTestSet,
    draw_scene,
    eye_kernel,
    generate_corpus,
    load_corpus,
    read_manifest,
    render_scene,
)
from conftest import flat_scene

SMALL = CorpusSpec(canvas=(96, 96), iod_range=(16.0, 20.0))


def corpus_files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_writes_identical_corpora(tmp_path):
    first = generate_corpus(SMALL, n_train=6, n_test=3, seed=7, out_dir=tmp_path / "a")
    second = generate_corpus(SMALL, n_train=6, n_test=3, seed=7, out_dir=tmp_path / "b", workers=3)
    assert first.corpus_hash == second.corpus_hash
    assert corpus_files(tmp_path / "a") == corpus_files(tmp_path / "b")

    other = generate_corpus(SMALL, n_train=6, n_test=3, seed=8, out_dir=tmp_path / "c")
    assert other.corpus_hash != first.corpus_hash


def test_manifest_records_scenes_and_pools(tmp_path):
    corpus = generate_corpus(SMALL, n_train=4, n_test=2, seed=3, out_dir=tmp_path, config_hash="abc")
    manifest = read_manifest(tmp_path)
    assert manifest["splits"] == {"train": 4, "test": 2}
    assert manifest["corpus_hash"] == corpus.corpus_hash
    assert manifest["config_hash"] == "abc"
    assert len(manifest["scenes"]["train"]) == 4
    assert manifest["identity_pools"]["test"][0] == 128
    assert json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))["seed"] == 3


def test_annotation_matches_requested_iod():
    _, annotation, _ = render_scene(flat_scene(canvas=(320, 320), center=(160.0, 150.0), iod=64.0))
    assert annotation.interocular == 64.0
    assert annotation.center == (160.0, 150.0)


def test_identity_pools_are_disjoint():
    corpus = generate_corpus(SMALL, n_train=12, n_test=6, seed=5)
    pools = SMALL.identity_pools()
    assert not set(pools["train"]) & set(pools["test"])
    assert {s.identity for s in corpus.scenes["train"]} <= set(pools["train"])
    assert {s.identity for s in corpus.scenes["test"]} <= set(pools["test"])
    with pytest.raises(IdentityOverlapError):
        generate_corpus(SMALL, 1, 1, identity_pools={"train": (0, 1, 2), "test": (2, 3)})


def test_frontal_face_is_left_right_symmetric():
    image, annotation, _ = render_scene(flat_scene(canvas=(65, 65), center=(32.0, 32.0)))
    np.testing.assert_array_equal(image.pixels, image.pixels[:, ::-1])
    assert annotation.left_eye[0] + annotation.right_eye[0] == 64.0


def test_opposite_poses_are_mirror_images():
    plus, ann_plus, _ = render_scene(flat_scene(canvas=(65, 65), center=(32.0, 32.0), pose_degrees=20.0))
    minus, ann_minus, _ = render_scene(flat_scene(canvas=(65, 65), center=(32.0, 32.0), pose_degrees=-20.0))
    np.testing.assert_array_equal(plus.pixels, minus.pixels[:, ::-1])
    assert not np.array_equal(plus.pixels, minus.pixels)
    assert ann_plus.left_eye[0] == 64.0 - ann_minus.right_eye[0]
    assert PoseBin.from_degrees(20.0) is PoseBin.RIGHT and PoseBin.from_degrees(-20.0) is PoseBin.LEFT


def test_noise_free_renders_repeat():
    spec = flat_scene(background="checker", clutter=5, brightness=0.03, contrast=0.9)
    first, _, _ = render_scene(spec)
    second, _, _ = render_scene(spec)
    np.testing.assert_array_equal(first.pixels, second.pixels)


def test_noise_is_seeded():
    first, _, _ = render_scene(flat_scene(noise=0.05, seed=1))
    again, _, _ = render_scene(flat_scene(noise=0.05, seed=1))
    other, _, _ = render_scene(flat_scene(noise=0.05, seed=2))
    np.testing.assert_array_equal(first.pixels, again.pixels)
    assert not np.array_equal(first.pixels, other.pixels)


def test_pixels_are_quantized_to_bytes():
    image, _, _ = render_scene(flat_scene(background="stripes", clutter=3, noise=0.03, seed=4))
    np.testing.assert_array_equal(np.rint(image.pixels * 255.0) / 255.0, image.pixels)


def test_eye_blobs_sit_on_the_annotation():
    spec = flat_scene()
    image, annotation, _ = render_scene(spec)
    radius = EYE_RADIUS * FaceModel.for_identity(spec.identity).eye_scale * spec.iod
    response = ndimage.correlate(1.0 - image.pixels, eye_kernel(radius), mode="constant")
    for eye in (annotation.left_eye, annotation.right_eye):
        x0, y0 = int(round(eye[0])), int(round(eye[1]))
        window = response[y0 - 3:y0 + 4, x0 - 3:x0 + 4]
        wy, wx = np.unravel_index(np.argmax(window), window.shape)
        assert abs(x0 - 3 + wx - eye[0]) <= 0.5
        assert abs(y0 - 3 + wy - eye[1]) <= 0.5


def test_identity_only_changes_the_face_region():
    spec = flat_scene(background="stripes", clutter=6)
    first, annotation, truth = render_scene(spec)
    second, _, _ = render_scene(flat_scene(background="stripes", clutter=6, identity=40))
    outside = np.ones(first.shape, dtype=bool)
    outside[max(0, truth.y - 2):truth.y + truth.h + 2, max(0, truth.x - 2):truth.x + truth.w + 2] = False
    np.testing.assert_array_equal(first.pixels[outside], second.pixels[outside])
    assert not np.array_equal(first.pixels, second.pixels)
    assert truth == face_rect(annotation)


def test_faces_must_fit_the_canvas():
    with pytest.raises(FaceOutOfBoundsError):
        render_scene(flat_scene(center=(5.0, 5.0)))
    rng = np.random.default_rng(0)
    with pytest.raises(FaceOutOfBoundsError):
        draw_scene(CorpusSpec(canvas=(64, 64)), rng, (0,), 0, iod=40.0)


def test_draw_scene_keeps_a_margin():
    spec = CorpusSpec(canvas=(120, 100), iod_range=(20.0, 20.0))
    rng = np.random.default_rng(2)
    for _ in range(200):
        scene = draw_scene(spec, rng, (0, 1), 0)
        truth = face_rect(scene.annotation())
        assert truth.x >= 1 and truth.y >= 1
        assert truth.x + truth.w <= 119 and truth.y + truth.h <= 99


def test_written_corpus_loads_back(tmp_path):
    corpus = generate_corpus(SMALL, n_train=5, n_test=2, seed=9, out_dir=tmp_path)
    loaded = load_corpus(tmp_path, "train")
    assert [s.key for s in loaded] == [s.key for s in corpus.train]
    for original, restored in zip(corpus.train, loaded):
        assert restored.annotation == original.annotation
        assert restored.pose_degrees == pytest.approx(original.pose_degrees)
        np.testing.assert_array_equal(restored.image.pixels, original.image.pixels)


def test_synthetic_test_set_renders_at_the_requested_octave():
    provider = SyntheticTestSet(SMALL, n_per_step=4, seed=1)
    samples = provider.samples(4.2)
    assert len(samples) == 4
    assert all(s.annotation.interocular == pytest.approx(2 ** 4.2) for s in samples)
    assert all(s.pose_bin is PoseBin.FRONTAL for s in samples)
    again = provider.samples(4.2)
    np.testing.assert_array_equal(samples[0].image.pixels, again[0].image.pixels)
