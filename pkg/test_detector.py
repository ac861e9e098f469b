#!/usr/bin/env python3
"""
Tests for bank application, ranking and PSR-based selection
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from detector import Backend, DetectionStatus, detect, max_psr_select
from errors import DegenerateInputError
from evaluation import OverlapCriterion, rect_overlap
from imagecore import AnnotatedSample, FaceRect, Image, PoseBin
from mosse import BankGrid, build_bank
from synth import draw_scene, render_scene
from conftest import flat_scene

FRONTAL_4 = BankGrid(octaves=(4.0,), poses=(PoseBin.FRONTAL,))


def single_scene_bank(dx: int, dy: int):
    """One-filter bank trained on a scene translated by (dx, dy); returns (bank, image)"""
    image, annotation, _ = render_scene(flat_scene(center=(32.0 + dx, 30.0 + dy)))
    bank = build_bank([AnnotatedSample("shifted", image, annotation)], FRONTAL_4)
    return bank, image


def test_translation_moves_the_peak_by_the_same_amount():
    base_bank, base_image = single_scene_bank(0, 0)
    base_peak = detect(base_image, base_bank)[0].peak
    assert base_peak == (32, 30)

    rng = np.random.default_rng(5)
    for dx, dy in rng.integers(-8, 9, size=(50, 2)):
        bank, image = single_scene_bank(int(dx), int(dy))
        detection = detect(image, bank)[0]
        assert detection.peak == (base_peak[0] + dx, base_peak[1] + dy)
        # Rect is centred on the peak: top-left = peak - template / 2
        assert detection.rect == FaceRect(detection.peak[0] - 16, detection.peak[1] - 20, 32, 40)


def test_matched_scale_filter_wins(two_scale):
    bank, test = two_scale
    criterion = OverlapCriterion()
    winners = []
    for sample in test:
        top = detect(sample.image, bank)[0]
        winners.append(top.filter_id[0] == 5.0 and criterion.passes(top.rect, sample.rect()))
    assert sum(winners) >= len(test) - 1


def test_full_ranking_covers_the_bank(bank39_run):
    bank, _, test = bank39_run
    result = detect(test[0].image, bank, k=len(bank))
    assert result.ok
    responding = [r for r in result.responses if r.detection is not None]
    assert len(responding) == 39
    assert len(result) == 39
    assert len(result.responses) == 39
    assert {d.filter_id for d in result} == set(bank.grid.cells())

    keys = [(-d.score, d.filter_id[0], d.filter_id[1].order) for d in result]
    assert keys == sorted(keys)
    assert len({d.filter_id for d in result}) == len(result)


def test_top_one_is_head_of_full_ranking(bank39_run):
    bank, _, test = bank39_run
    for sample in test[:3]:
        for backend in Backend:
            full = detect(sample.image, bank, backend, k=len(bank))
            assert detect(sample.image, bank, backend, k=1).detections == full.detections[:1]


def test_detection_is_deterministic_and_thread_independent(repeated_bank, repeated_corpus):
    image = repeated_corpus.test[0].image
    for backend in Backend:
        first = detect(image, repeated_bank, backend, k=2)
        assert detect(image, repeated_bank, backend, k=2) == first
        assert detect(image, repeated_bank, backend, k=2, workers=4).detections == first.detections


def test_ncc_ranking_ignores_global_brightness(repeated_bank, repeated_corpus):
    for sample in repeated_corpus.test[:5]:
        base = detect(sample.image, repeated_bank, Backend.SPATIAL_NCC, k=2)
        for k in (0.8, 3.7):
            scaled = detect(Image(sample.image.pixels * k), repeated_bank, Backend.SPATIAL_NCC, k=2)
            assert [(d.filter_id, d.rect) for d in scaled] == [(d.filter_id, d.rect) for d in base]
            np.testing.assert_allclose([d.score for d in scaled], [d.score for d in base], atol=1e-6)


def test_frequency_ranking_survives_dimming(two_scale):
    bank, test = two_scale
    for sample in test[:4]:
        base = detect(sample.image, bank)[0]
        dimmed = detect(Image(sample.image.pixels * 0.8), bank)[0]
        assert dimmed.filter_id == base.filter_id
        assert dimmed.rect == base.rect


def test_constant_image_gets_no_response(repeated_bank):
    result = detect(Image(np.full((160, 192), 0.5)), repeated_bank)
    assert result.status is DetectionStatus.NO_RESPONSE
    assert not result.ok
    assert len(result) == 0
    assert result.to_dict() == {"status": "NO_RESPONSE", "detections": []}


def test_bad_arguments(repeated_bank, repeated_corpus):
    image = repeated_corpus.test[0].image
    with pytest.raises(ValueError):
        detect(image, repeated_bank, k=0)
    empty = type(repeated_bank)((), (), repeated_bank.grid, repeated_bank.sigma)
    with pytest.raises(DegenerateInputError):
        detect(image, empty)


def centred_faces(spec, count: int):
    """Test-identity faces at the bank's scales, upright and near the frame centre"""
    identities = spec.identity_pools()["test"]
    width, height = spec.canvas
    faces = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([41, i]))
        iod = (16.0, 24.0)[i % 2]
        scene = draw_scene(spec, rng, identities, i, iod=iod)
        jitter = rng.uniform(-6.0, 6.0, size=2)
        scene = replace(scene, center=(width / 2 + jitter[0], height / 2 + jitter[1]), pose_degrees=0.0)
        faces.append(render_scene(scene)[0])
    return faces


def test_uniform_noise_scores_below_every_face(repeated_bank, repeated_corpus):
    face_scores = [detect(image, repeated_bank)[0].score for image in centred_faces(repeated_corpus.spec, 24)]
    rng = np.random.default_rng(5)
    noise_scores = [detect(Image(rng.uniform(0.0, 1.0, (160, 192))), repeated_bank)[0].score
                    for _ in range(5)]
    assert max(noise_scores) < min(face_scores)


def test_detection_time_grows_near_linearly_with_area():
    bank, _ = single_scene_bank(0, 0)
    rng = np.random.default_rng(9)
    timings = []
    for side in (128, 256, 512):
        image = Image(rng.uniform(0.0, 1.0, (side, side)))
        detect(image, bank)
        runs = []
        for _ in range(7):
            start = time.perf_counter()
            detect(image, bank)
            runs.append(time.perf_counter() - start)
        timings.append(float(np.median(runs)))
    # Each step quadruples the area; n log n stays well under 2.6 squared
    for small, large in zip(timings, timings[1:]):
        assert large / small < 2.6 ** 2


def test_max_psr_select_rules():
    only = (5.0, PoseBin.FRONTAL)
    assert max_psr_select([(only, 3.0)]) == only
    assert max_psr_select({(6.0, PoseBin.FRONTAL): 5.0, (5.0, PoseBin.FRONTAL): 5.0}) == (5.0, PoseBin.FRONTAL)
    assert max_psr_select([((5.0, PoseBin.RIGHT), 2.0), ((5.0, PoseBin.LEFT), 2.0)]) == (5.0, PoseBin.LEFT)
    with pytest.raises(ValueError):
        max_psr_select([])


def test_max_psr_select_matches_scan():
    rng = np.random.default_rng(17)
    cells = BankGrid.default().cells()
    for _ in range(20):
        scores = rng.normal(size=len(cells))
        assert max_psr_select(list(zip(cells, scores))) == cells[int(np.argmax(scores))]


def test_detection_to_dict(repeated_bank, repeated_corpus):
    result = detect(repeated_corpus.test[0].image, repeated_bank, Backend.SPATIAL_NCC)
    record = result.to_dict()
    assert record["status"] == "OK"
    detection = record["detections"][0]
    assert detection["backend"] == "spatial-ncc"
    assert detection["filter_id"]["pose"] == "FRONTAL"
    assert set(detection["rect"]) == {"x", "y", "w", "h"}
    assert rect_overlap(result[0].rect, result[0].rect) == 1.0
