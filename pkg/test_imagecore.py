#!/usr/bin/env python3
"""
Tests for image I/O, preprocessing, the DFT contract and face geometry
"""

import numpy as np
import pytest

from errors import (
    AnnotationError,
    ConfigConflictError,
    DegenerateInputError,
    ImageNotFoundError,
    MalformedHeaderError,
    UnsupportedBitDepthError,
)
from imagecore import (
    AnnotatedSample,
    EyeAnnotation,
    FaceRect,
    Image,
    PoseBin,
    apply_window,
    cosine_window,
    face_rect,
    forward_dft,
    gaussian_goal,
    inverse_dft,
    load_annotations,
    load_image,
    log_transform,
    normalize,
    preprocess,
    resample,
    resample_sample,
    save_annotations,
    save_image,
)
from synth import render_scene
from conftest import flat_scene


def write_pgm(path, header: bytes, raster: bytes):
    path.write_bytes(header + raster)
    return path


def test_load_two_by_two_pgm(tmp_path):
    """Bytes map to [0, 1] by dividing by maxval"""
    path = write_pgm(tmp_path / "tiny.pgm", b"P5\n2 2\n255\n", bytes([0, 255, 128, 64]))
    img = load_image(path)
    assert (img.width, img.height) == (2, 2)
    np.testing.assert_array_equal(img.pixels, np.array([[0.0, 1.0], [128 / 255, 64 / 255]]))


def test_header_comments_are_skipped(tmp_path):
    path = write_pgm(tmp_path / "commented.pgm", b"P5\n# made by hand\n2 1\n# depth\n255\n", bytes([10, 20]))
    np.testing.assert_array_equal(load_image(path).pixels, np.array([[10 / 255, 20 / 255]]))


def test_sixteen_bit_pgm_is_rejected(tmp_path):
    path = write_pgm(tmp_path / "deep.pgm", b"P5\n2 2\n65535\n", bytes(8))
    with pytest.raises(UnsupportedBitDepthError):
        load_image(path)


def test_load_errors_are_distinct(tmp_path):
    with pytest.raises(ImageNotFoundError):
        load_image(tmp_path / "missing.pgm")
    with pytest.raises(MalformedHeaderError):
        load_image(write_pgm(tmp_path / "p2.pgm", b"P2\n2 2\n255\n", b"0 1 2 3"))
    with pytest.raises(MalformedHeaderError):
        load_image(write_pgm(tmp_path / "short.pgm", b"P5\n4 4\n255\n", bytes(3)))


def test_rendered_scene_round_trips_through_pgm(tmp_path):
    image, _, _ = render_scene(flat_scene(background="stripes", clutter=4, noise=0.05, seed=3))
    path = save_image(image, tmp_path / "scene.pgm")
    np.testing.assert_array_equal(load_image(path).pixels, image.pixels)


def test_image_rejects_non_finite_values():
    with pytest.raises(DegenerateInputError):
        Image(np.array([[0.0, np.nan]]))


def test_preprocess_stages():
    rng = np.random.default_rng(5)
    img = Image(rng.uniform(0, 1, (12, 16)))

    logged = log_transform(img)
    np.testing.assert_allclose(logged.pixels, np.log1p(img.pixels))

    normed = normalize(logged)
    assert abs(normed.pixels.mean()) < 1e-12
    assert abs(np.linalg.norm(normed.pixels) - 1.0) < 1e-12

    window = cosine_window(16, 12)
    assert window.shape == (12, 16)
    assert np.all(window[0, :] == 0) and np.all(window[:, 0] == 0)
    np.testing.assert_allclose(preprocess(img).pixels, apply_window(normed).pixels)
    out = preprocess(img).pixels
    assert out[0, 0] == out[0, -1] == out[-1, 0] == out[-1, -1] == 0.0


def test_preprocess_rejects_constant_and_negative_images():
    with pytest.raises(DegenerateInputError):
        preprocess(Image(np.full((8, 8), 0.3)))
    with pytest.raises(DegenerateInputError):
        preprocess(Image(np.full((8, 8), -0.1)))


def test_dft_of_impulse_is_flat_and_dft_is_linear():
    impulse = np.zeros((8, 12))
    impulse[0, 0] = 1.0
    np.testing.assert_allclose(forward_dft(Image(impulse)).values, np.ones((8, 12)), atol=1e-12)

    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(2, 10, 14))
    combined = forward_dft(Image(a + b)).values
    separate = forward_dft(Image(a)).values + forward_dft(Image(b)).values
    assert np.max(np.abs(combined - separate)) <= 1e-6


def test_dft_round_trip_and_padding():
    rng = np.random.default_rng(6)
    img = Image(rng.normal(size=(13, 9)))
    back = inverse_dft(forward_dft(img))
    assert np.max(np.abs(back.pixels - img.pixels)) <= 1e-6 * np.max(np.abs(img.pixels))

    padded = forward_dft(img, shape=(16, 16))
    assert padded.shape == (16, 16)
    assert padded.pad == (7, 3)
    np.testing.assert_allclose(inverse_dft(padded).pixels, img.pixels, atol=1e-12)


def test_gaussian_goal_peaks_at_center():
    goal = gaussian_goal(20, 10, (7.0, 4.0), 2.0)
    assert goal.pixels[4, 7] == 1.0
    assert np.unravel_index(np.argmax(goal.pixels), goal.shape) == (4, 7)
    with pytest.raises(AnnotationError):
        gaussian_goal(20, 10, (25.0, 4.0), 2.0)


def test_gaussian_goal_shape():
    goal = gaussian_goal(21, 15, (10.0, 7.0), 2.0)
    assert abs(goal.pixels[7, 12] - np.exp(-0.5)) <= 1e-9
    assert abs(goal.pixels[9, 10] - np.exp(-0.5)) <= 1e-9
    np.testing.assert_allclose(goal.pixels, goal.pixels[::-1, ::-1], atol=1e-15)

    rng = np.random.default_rng(12)
    for _ in range(50):
        # Keep clear of half-pixel ties
        cx = rng.integers(1, 40) + rng.uniform(-0.4, 0.4)
        cy = rng.integers(1, 30) + rng.uniform(-0.4, 0.4)
        goal = gaussian_goal(42, 32, (cx, cy), 2.0)
        assert np.unravel_index(np.argmax(goal.pixels), goal.shape) == (round(cy), round(cx))


def test_eye_annotation_geometry():
    ann = EyeAnnotation((10.0, 20.0), (26.0, 20.0))
    assert ann.interocular == 16.0
    assert ann.center == (18.0, 20.0)
    assert ann.octave == 4.0
    with pytest.raises(AnnotationError):
        EyeAnnotation((5.0, 5.0), (5.0, 5.0))


def test_face_rect_crop_rule():
    """w = 2 * IOD, h = 2.5 * IOD, centred on the rounded eye midpoint"""
    assert face_rect(EyeAnnotation((10.0, 20.0), (26.0, 20.0))) == FaceRect(2, 0, 32, 40)
    # Midpoint 18.5 rounds half up to 19
    assert face_rect(EyeAnnotation((10.5, 20.0), (26.5, 20.0))) == FaceRect(3, 0, 32, 40)


def test_face_rect_fit_to_shifts_instead_of_shrinking():
    assert FaceRect(-5, 60, 32, 40).fit_to(64, 80) == FaceRect(0, 40, 32, 40)
    assert FaceRect(3, 3, 100, 10).fit_to(64, 80) == FaceRect(0, 3, 64, 10)


def test_pose_bins():
    assert PoseBin.from_degrees(None) is PoseBin.FRONTAL
    assert PoseBin.from_degrees(-12.0) is PoseBin.FRONTAL
    assert PoseBin.from_degrees(12.0) is PoseBin.FRONTAL
    assert PoseBin.from_degrees(-12.5) is PoseBin.LEFT
    assert PoseBin.from_degrees(20.0) is PoseBin.RIGHT
    assert [p.order for p in PoseBin] == [0, 1, 2]


def test_resample_refuses_upsampling():
    img = Image(np.ones((10, 10)))
    with pytest.raises(ConfigConflictError):
        resample(img, 1.5)
    assert resample(img, 1.0) is img


def test_resample_sample_tracks_eyes():
    image, ann, _ = render_scene(flat_scene(canvas=(65, 65), center=(32.0, 32.0)))
    # 65 -> 33 pixels: the corner-aligned grid maps coordinates by exactly 0.5
    small = resample_sample(AnnotatedSample("s", image, ann), 33 / 65)
    assert small.image.shape == (33, 33)
    assert small.annotation.center == (16.0, 16.0)
    assert small.annotation.interocular == 8.0


def test_annotation_csv_round_trip(tmp_path):
    image, ann, _ = render_scene(flat_scene())
    save_image(image, tmp_path / "images" / "a.pgm")
    samples = [AnnotatedSample("images/a.pgm", image, ann, pose_degrees=15.0),
               AnnotatedSample("images/a.pgm", image, ann.shifted(1.0, 2.0))]
    save_annotations(samples, tmp_path / "set.csv")

    loaded = load_annotations(tmp_path / "set.csv")
    assert [s.key for s in loaded] == ["images/a.pgm", "images/a.pgm"]
    assert loaded[0].annotation == ann
    assert loaded[0].pose_bin is PoseBin.RIGHT
    assert loaded[1].pose_degrees is None
    assert loaded[1].annotation.center == (ann.center[0] + 1.0, ann.center[1] + 2.0)
    np.testing.assert_array_equal(loaded[0].image.pixels, image.pixels)


def test_annotations_outside_frame_are_rejected(tmp_path):
    image, ann, _ = render_scene(flat_scene())
    save_image(image, tmp_path / "a.pgm")
    save_annotations([AnnotatedSample("a.pgm", image, ann.shifted(100.0, 0.0))], tmp_path / "bad.csv")
    with pytest.raises(AnnotationError):
        load_annotations(tmp_path / "bad.csv")
