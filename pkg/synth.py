"""
Synthetic repeated-setting corpora

Procedural faces (elliptical head, two eye disks, a mouth bar) rendered
over a fixed background that stands in for one capture location. Every
scene is determined by its SceneSpec; corpora are determined by a
CorpusSpec and a seed and are written byte-identically on every run.
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from errors import ConfigConflictError, FaceOutOfBoundsError, IdentityOverlapError
from imagecore import (
    DEFAULT_CROP,
    AnnotatedSample,
    EyeAnnotation,
    FaceRect,
    Image,
    face_rect,
    load_annotations,
    save_annotations,
    save_image,
)

logger = logging.getLogger(__name__)

BACKGROUNDS = ("stripes", "checker", "flat")

SPLITS = ("train", "test")

# Stream tags for SeedSequence so identity, location and scene draws never collide
_IDENTITY_STREAM = 1
_LOCATION_STREAM = 2
_SCENE_STREAM = 3
_SWEEP_STREAM = 4

# Face geometry in units of the interocular distance
HEAD_HALF_WIDTH = (0.68, 0.75)
HEAD_HALF_HEIGHT = (0.90, 1.00)
HEAD_DROP = 0.2
EYE_RADIUS = 0.1
MOUTH_DROP = 0.55
POSE_SHEAR = 0.08
POSE_HEAD_SHIFT = 0.08
POSE_EYE_ASYMMETRY = 0.2

EYE_LEVEL = 0.05
MOUTH_LEVEL = 0.3


@dataclass(frozen=True)
class FaceModel:
    """Per-identity proportions and tones, drawn from the identity id"""

    identity: int
    head_half_width: float
    head_half_height: float
    eye_scale: float
    mouth_half_width: float
    skin: float

    @classmethod
    def for_identity(cls, identity: int) -> "FaceModel":
        rng = np.random.default_rng(np.random.SeedSequence([_IDENTITY_STREAM, int(identity)]))
        return cls(
            identity=int(identity),
            head_half_width=float(rng.uniform(*HEAD_HALF_WIDTH)),
            head_half_height=float(rng.uniform(*HEAD_HALF_HEIGHT)),
            eye_scale=float(rng.uniform(0.9, 1.1)),
            mouth_half_width=float(rng.uniform(0.18, 0.3)),
            skin=float(rng.uniform(0.7, 0.85)),
        )


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one scene"""

    canvas: Tuple[int, int]
    center: Tuple[float, float]
    iod: float
    identity: int = 0
    pose_degrees: float = 0.0
    background: str = "stripes"
    clutter: int = 6
    location_seed: int = 0
    brightness: float = 0.0
    contrast: float = 1.0
    noise: float = 0.0
    seed: int = 0

    def annotation(self) -> EyeAnnotation:
        cx, cy = self.center
        half = self.iod / 2.0
        return EyeAnnotation((cx - half, cy), (cx + half, cy))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class CorpusSpec:
    """Distribution scenes are drawn from"""

    canvas: Tuple[int, int] = (192, 160)
    background: str = "stripes"
    clutter: int = 6
    location_seed: int = 0
    iod_range: Tuple[float, float] = (16.0, 32.0)
    octaves: Optional[Tuple[float, ...]] = None
    poses: Optional[Tuple[float, ...]] = None
    pose_range: Tuple[float, float] = (-10.0, 10.0)
    brightness_jitter: float = 0.05
    contrast_jitter: float = 0.1
    noise: float = 0.02
    train_identities: int = 128
    test_identities: int = 36
    crop: Tuple[float, float] = DEFAULT_CROP

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ConfigConflictError(f"unknown background {self.background!r}; expected one of {BACKGROUNDS}")
        if self.iod_range[0] <= 0 or self.iod_range[1] < self.iod_range[0]:
            raise ConfigConflictError(f"bad IOD range {self.iod_range}")
        if self.train_identities < 1 or self.test_identities < 1:
            raise ConfigConflictError("identity pools must be non-empty")

    def identity_pools(self) -> Dict[str, Tuple[int, ...]]:
        return {
            "train": tuple(range(self.train_identities)),
            "test": tuple(range(self.train_identities, self.train_identities + self.test_identities)),
        }

    def to_dict(self) -> Dict:
        return asdict(self)


def eye_kernel(radius: float) -> np.ndarray:
    """Binary eye disk of the given radius, centred in a (2 * ceil(r) + 1)^2 grid"""
    half = int(math.ceil(radius))
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    return ((offsets[:, None] ** 2 + offsets[None, :] ** 2) <= radius ** 2).astype(np.float64)


def background_image(width: int, height: int, pattern: str, clutter: int, location_seed: int) -> np.ndarray:
    """Fixed location backdrop: a texture plus clutter objects from the location seed"""
    xs = np.arange(width, dtype=np.float64)[None, :]
    ys = np.arange(height, dtype=np.float64)[:, None]
    if pattern == "stripes":
        canvas = 0.5 + 0.15 * np.sin(2 * np.pi * xs / 17.0) * np.cos(2 * np.pi * ys / 23.0)
    elif pattern == "checker":
        canvas = np.where(((xs // 12) + (ys // 12)) % 2 == 0, 0.4, 0.6) * np.ones((height, width))
    else:
        canvas = np.full((height, width), 0.5)

    rng = np.random.default_rng(np.random.SeedSequence([_LOCATION_STREAM, int(location_seed)]))
    for _ in range(clutter):
        w = int(rng.integers(6, max(7, width // 5)))
        h = int(rng.integers(6, max(7, height // 5)))
        x = int(rng.integers(0, max(1, width - w)))
        y = int(rng.integers(0, max(1, height - h)))
        level = float(rng.uniform(0.2, 0.9))
        if rng.random() < 0.5:
            canvas[y:y + h, x:x + w] = level
        else:
            inside = (((xs - x - w / 2) / (w / 2)) ** 2 + ((ys - y - h / 2) / (h / 2)) ** 2) <= 1.0
            canvas = np.where(inside, level, canvas)
    return canvas


def _face_layer(spec: SceneSpec, model: FaceModel) -> Tuple[np.ndarray, np.ndarray]:
    """Face intensities and coverage mask on the canvas grid"""
    width, height = spec.canvas
    cx, cy = spec.center
    iod = spec.iod
    dx = np.arange(width, dtype=np.float64)[None, :] - cx
    dy = np.arange(height, dtype=np.float64)[:, None] - cy

    swing = math.sin(math.radians(spec.pose_degrees))
    shear = POSE_SHEAR * swing
    head_shift = -POSE_HEAD_SHIFT * swing * iod
    # Horizontal coordinate in the face's sheared frame
    u = dx - shear * dy

    head = (((u - head_shift) / (model.head_half_width * iod)) ** 2
            + ((dy - HEAD_DROP * iod) / (model.head_half_height * iod)) ** 2) <= 1.0
    layer = np.where(head, model.skin, 0.0)

    mouth = ((np.abs(u - head_shift) <= model.mouth_half_width * iod)
             & (np.abs(dy - MOUTH_DROP * iod) <= 0.04 * iod))
    layer = np.where(mouth, MOUTH_LEVEL, layer)

    radius = EYE_RADIUS * model.eye_scale * iod
    eyes = np.zeros(layer.shape, dtype=bool)
    for side, asymmetry in ((-1.0, 1.0 + POSE_EYE_ASYMMETRY * swing), (1.0, 1.0 - POSE_EYE_ASYMMETRY * swing)):
        ex = side * iod / 2.0
        eyes |= ((dx - ex) ** 2 + dy ** 2) <= (radius * asymmetry) ** 2
    layer = np.where(eyes, EYE_LEVEL, layer)
    return layer, head | mouth | eyes


def render_scene(spec: SceneSpec, crop: Tuple[float, float] = DEFAULT_CROP) -> Tuple[Image, EyeAnnotation, FaceRect]:
    """
    Render one scene

    Eye centres sit exactly at the emitted annotation. Pixels are quantized
    to k/255 so a PGM round trip is lossless.

    Args:
        spec: Scene parameters
        crop: Crop rule for the ground-truth rect

    Returns:
        (image, annotation, ground-truth face rect)
    """
    width, height = spec.canvas
    annotation = spec.annotation()
    truth = face_rect(annotation, crop)
    if not truth.inside(width, height):
        raise FaceOutOfBoundsError(f"face rect {truth.to_dict()} does not fit the {width}x{height} canvas")

    canvas = background_image(width, height, spec.background, spec.clutter, spec.location_seed)
    layer, mask = _face_layer(spec, FaceModel.for_identity(spec.identity))
    face = np.clip(spec.contrast * layer + spec.brightness, 0.0, 1.0)
    canvas = np.where(mask, face, canvas)

    if spec.noise > 0:
        rng = np.random.default_rng(np.random.SeedSequence([_SCENE_STREAM, int(spec.seed)]))
        canvas = canvas + rng.normal(0.0, spec.noise, canvas.shape)
    pixels = np.rint(np.clip(canvas, 0.0, 1.0) * 255.0) / 255.0
    return Image(pixels), annotation, truth


def _draw_center(rng: np.random.Generator, canvas: Tuple[int, int], iod: float,
                 crop: Tuple[float, float]) -> Tuple[float, float]:
    width, height = canvas
    half_w = crop[0] * iod + 2
    half_h = crop[1] * iod + 2
    if 2 * half_w > width or 2 * half_h > height:
        raise FaceOutOfBoundsError(f"IOD {iod:.1f} does not fit a {width}x{height} canvas")
    cx = float(rng.integers(math.ceil(half_w), math.floor(width - half_w) + 1))
    cy = float(rng.integers(math.ceil(half_h), math.floor(height - half_h) + 1))
    return cx, cy


def draw_scene(spec: CorpusSpec, rng: np.random.Generator, identities: Sequence[int],
               scene_seed: int, iod: Optional[float] = None) -> SceneSpec:
    """Sample one scene from the corpus distribution"""
    if iod is None:
        if spec.octaves:
            iod = 2.0 ** float(rng.choice(spec.octaves))
        else:
            iod = float(rng.uniform(*spec.iod_range))
    if spec.poses:
        pose = float(rng.choice(spec.poses))
    else:
        pose = float(rng.uniform(*spec.pose_range))
    identity = int(rng.choice(identities))
    center = _draw_center(rng, spec.canvas, iod, spec.crop)
    return SceneSpec(
        canvas=tuple(spec.canvas),
        center=center,
        iod=float(iod),
        identity=identity,
        pose_degrees=pose,
        background=spec.background,
        clutter=spec.clutter,
        location_seed=spec.location_seed,
        brightness=float(rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)),
        contrast=float(1.0 + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter)),
        noise=spec.noise,
        seed=scene_seed,
    )


@dataclass
class Corpus:
    """Generated splits plus the scenes they were rendered from"""

    spec: CorpusSpec
    seed: int
    samples: Dict[str, List[AnnotatedSample]] = field(default_factory=dict)
    scenes: Dict[str, List[SceneSpec]] = field(default_factory=dict)
    corpus_hash: Optional[str] = None

    @property
    def train(self) -> List[AnnotatedSample]:
        return self.samples.get("train", [])

    @property
    def test(self) -> List[AnnotatedSample]:
        return self.samples.get("test", [])


def _render_split(spec: CorpusSpec, split: str, count: int, seed: int,
                  identities: Sequence[int], workers: int, progress: bool):
    split_index = SPLITS.index(split)

    def build(i: int):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), split_index, i]))
        scene_seed = int(rng.integers(0, 2 ** 31 - 1))
        scene = draw_scene(spec, rng, identities, scene_seed)
        image, annotation, _ = render_scene(scene, spec.crop)
        sample = AnnotatedSample(f"{split}/{i:05d}.pgm", image, annotation, scene.pose_degrees)
        return scene, sample

    indices = range(count)
    if workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(build, indices), total=count,
                                desc=f"Rendering {split}", disable=not progress))
    else:
        results = [build(i) for i in tqdm(indices, desc=f"Rendering {split}", disable=not progress)]
    return [r[0] for r in results], [r[1] for r in results]


def generate_corpus(spec: CorpusSpec,
                    n_train: int,
                    n_test: int,
                    seed: int = 0,
                    out_dir=None,
                    workers: int = 1,
                    progress: bool = False,
                    config_hash: Optional[str] = None,
                    identity_pools: Optional[Dict[str, Sequence[int]]] = None) -> Corpus:
    """
    Generate train and test splits with disjoint identities at one location

    Args:
        spec: Scene distribution
        n_train: Training scenes
        n_test: Test scenes
        seed: Corpus seed; scene i of a split uses SeedSequence([seed, split, i])
        out_dir: When given, write PGMs, CSVs and manifest.json here
        workers: Rendering threads
        progress: Show progress bars
        config_hash: Producing config hash recorded in the manifest
        identity_pools: Override the default train/test identity ids

    Returns:
        Corpus with both splits (and corpus_hash when written)
    """
    pools = {k: tuple(int(i) for i in v) for k, v in (identity_pools or spec.identity_pools()).items()}
    shared = set(pools["train"]) & set(pools["test"])
    if shared:
        raise IdentityOverlapError(f"train and test identity pools share {len(shared)} ids, e.g. {min(shared)}")

    corpus = Corpus(spec=spec, seed=int(seed))
    for split, count in (("train", n_train), ("test", n_test)):
        scenes, samples = _render_split(spec, split, count, seed, pools[split], workers, progress)
        corpus.scenes[split] = scenes
        corpus.samples[split] = samples
    logger.info(f"📊 Rendered {n_train} train and {n_test} test scenes (seed {seed})")

    if out_dir is not None:
        corpus.corpus_hash = write_corpus(corpus, out_dir, pools, config_hash)
    return corpus


def _hash_files(root: Path, relative_paths: Sequence[str]) -> str:
    digest = hashlib.sha256()
    for rel in sorted(relative_paths):
        digest.update(rel.encode("utf-8"))
        digest.update((root / rel).read_bytes())
    return digest.hexdigest()[:16]


def write_corpus(corpus: Corpus, out_dir, pools: Dict[str, Sequence[int]],
                 config_hash: Optional[str] = None) -> str:
    """Write splits and manifest; returns the corpus hash over every written image and CSV"""
    root = Path(out_dir)
    written = []
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
        for sample in corpus.samples.get(split, []):
            save_image(sample.image, root / sample.key)
            written.append(sample.key)
        save_annotations(corpus.samples.get(split, []), root / f"{split}.csv")
        written.append(f"{split}.csv")

    corpus_hash = _hash_files(root, written)
    manifest = {
        "spec": corpus.spec.to_dict(),
        "seed": corpus.seed,
        "splits": {split: len(corpus.samples.get(split, [])) for split in SPLITS},
        "identity_pools": {split: list(pools[split]) for split in SPLITS},
        "scenes": {split: [s.to_dict() for s in corpus.scenes.get(split, [])] for split in SPLITS},
        "config_hash": config_hash,
        "corpus_hash": corpus_hash,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    logger.info(f"✅ Corpus written to {root} (hash {corpus_hash})")
    return corpus_hash


def read_manifest(corpus_dir) -> Dict:
    manifest_path = Path(corpus_dir) / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_corpus(corpus_dir, split: str) -> List[AnnotatedSample]:
    """Read one split of a written corpus"""
    if split not in SPLITS:
        raise ConfigConflictError(f"unknown split {split!r}; expected one of {SPLITS}")
    return load_annotations(Path(corpus_dir) / f"{split}.csv")


class SyntheticTestSet:
    """
    Test scenes rendered natively at a requested octave

    Identities come from the corpus test pool; placements and jitter are
    seeded by (seed, octave, index) so every octave step is reproducible.
    """

    def __init__(self, spec: CorpusSpec, n_per_step: int = 12, seed: int = 0,
                 pose_degrees: float = 0.0):
        self.spec = spec
        self.n_per_step = n_per_step
        self.seed = seed
        self.pose_degrees = pose_degrees

    def samples(self, octave: float) -> List[AnnotatedSample]:
        iod = 2.0 ** octave
        identities = self.spec.identity_pools()["test"]
        step_key = int(round(octave * 1000))
        out = []
        for i in range(self.n_per_step):
            rng = np.random.default_rng(np.random.SeedSequence([_SWEEP_STREAM, int(self.seed), step_key, i]))
            scene = draw_scene(self.spec, rng, identities, int(rng.integers(0, 2 ** 31 - 1)), iod=iod)
            scene = replace(scene, pose_degrees=self.pose_degrees)
            image, annotation, _ = render_scene(scene, self.spec.crop)
            out.append(AnnotatedSample(f"synthetic/{octave:.2f}/{i:03d}", image, annotation, scene.pose_degrees))
        return out
