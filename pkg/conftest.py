"""
Shared pytest fixtures: small synthetic corpora and trained banks

Session-scoped so the expensive renders and trainings run once.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from imagecore import AnnotatedSample, PoseBin
from mosse import BankGrid, build_bank
from synth import CorpusSpec, SceneSpec, draw_scene, generate_corpus, render_scene

POSE_DEGREES = {PoseBin.LEFT: -20.0, PoseBin.FRONTAL: 0.0, PoseBin.RIGHT: 20.0}

# Canvas large enough for the octave-7 crop (256 x 320) plus the generator margin
BANK39_CANVAS = (288, 336)


def flat_scene(**overrides) -> SceneSpec:
    """Noise-free scene on a flat backdrop"""
    base = dict(canvas=(64, 64), center=(32.0, 30.0), iod=16.0, identity=3, pose_degrees=0.0,
                background="flat", clutter=0, noise=0.0)
    base.update(overrides)
    return SceneSpec(**base)


def render_samples(spec: CorpusSpec, cells, per_cell: int, identities, seed: int, prefix: str):
    """Render `per_cell` scenes for every (octave, pose degrees) cell"""
    samples = []
    for c, (octave, pose) in enumerate(cells):
        for i in range(per_cell):
            rng = np.random.default_rng(np.random.SeedSequence([seed, c, i]))
            scene = draw_scene(spec, rng, identities, int(rng.integers(0, 2 ** 31 - 1)), iod=2.0 ** octave)
            scene = replace(scene, pose_degrees=pose)
            image, annotation, _ = render_scene(scene)
            samples.append(AnnotatedSample(f"{prefix}/{c:02d}_{i}", image, annotation, pose))
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def repeated_corpus():
    """256 train / 73 test scenes at one location, IOD 16-32, disjoint identities"""
    return generate_corpus(CorpusSpec(), n_train=256, n_test=73, seed=7)


@pytest.fixture(scope="session")
def repeated_bank(repeated_corpus):
    """Two frontal filters at IOD 16 and 24"""
    grid = BankGrid(octaves=(4.0, math.log2(24.0)), poses=(PoseBin.FRONTAL,))
    return build_bank(repeated_corpus.train, grid)


@pytest.fixture(scope="session")
def two_scale():
    """Bank with frontal filters at octaves 4 and 5, plus test scenes at octave 5"""
    spec = CorpusSpec(octaves=(4.0, 5.0), pose_range=(0.0, 0.0))
    corpus = generate_corpus(spec, n_train=96, n_test=0, seed=11)
    bank = build_bank(corpus.train, BankGrid(octaves=(4.0, 5.0), poses=(PoseBin.FRONTAL,)))
    test = render_samples(spec, [(5.0, 0.0)], 8, spec.identity_pools()["test"], seed=12, prefix="octave5")
    return bank, test


@pytest.fixture(scope="session")
def bank39_run():
    """Default 39-filter bank, three scenes per cell, and small-face test scenes"""
    spec = CorpusSpec(canvas=BANK39_CANVAS)
    grid = BankGrid.default()
    cells = [(octave, POSE_DEGREES[pose]) for octave, pose in grid.cells()]
    train = render_samples(spec, cells, 3, spec.identity_pools()["train"], seed=21, prefix="train")
    bank = build_bank(train, grid)
    test_cells = [(octave, 0.0) for octave in (4.0, 4.5, 5.0, 5.5)]
    test = render_samples(spec, test_cells, 3, spec.identity_pools()["test"], seed=22, prefix="test")
    return bank, train, test
