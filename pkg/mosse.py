"""
MOSSE filter training

Exact and MOSSE filters trained in the frequency domain, scale x pose filter
banks, and the CFAD bank file format.

Conventions: a filter's `freq` holds H* (the conjugate filter) so that the
correlation output is G = F * H*. The spatial kernel is stored in wrapped
layout (offset 0 at index [0, 0]).
"""

import io
import json
import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from errors import (
    AnnotationError,
    BankFormatError,
    BankIntegrityError,
    BankTruncatedError,
    ConfigConflictError,
    DimensionMismatchError,
    DivisionDegenerateError,
    EmptyAccumulatorError,
    EmptyCellError,
    ZeroBinError,
)
from imagecore import (
    DEFAULT_CROP,
    AnnotatedSample,
    EyeAnnotation,
    FrequencyGrid,
    Image,
    PoseBin,
    crop_size,
    forward_dft,
    gaussian_goal,
    preprocess,
    rect_around,
)

logger = logging.getLogger(__name__)

BANK_MAGIC = b"CFAD"
BANK_VERSION = 1
MANIFEST_KEYS = ("grid", "sigma", "filter_count", "filters")
FILTER_KEYS = ("octave", "pose", "train_count")

MIN_OCTAVE = 3.0
MAX_OCTAVE = 7.5

FilterId = Tuple[float, PoseBin]


def _power_spectrum(values: np.ndarray) -> np.ndarray:
    """F * conj(F) with an exactly zero imaginary part"""
    return (values.real ** 2 + values.imag ** 2).astype(np.complex128)


@dataclass(frozen=True, eq=False)
class MosseAccumulator:
    """Running sums of G * conj(F) and F * conj(F) over training frames"""

    numerator: FrequencyGrid
    denominator: FrequencyGrid
    count: int = 0
    iod_total: float = 0.0

    @classmethod
    def empty(cls, width: int, height: int) -> "MosseAccumulator":
        zeros = np.zeros((height, width), dtype=np.complex128)
        return cls(FrequencyGrid(zeros), FrequencyGrid(zeros))

    @property
    def dims(self) -> Tuple[int, int]:
        return (self.numerator.width, self.numerator.height)

    def merge(self, other: "MosseAccumulator") -> "MosseAccumulator":
        """Element-wise sum of two accumulators over same-sized frames"""
        if self.dims != other.dims:
            raise DimensionMismatchError(f"cannot merge accumulators of dims {self.dims} and {other.dims}")
        return MosseAccumulator(
            FrequencyGrid(self.numerator.values + other.numerator.values),
            FrequencyGrid(self.denominator.values + other.denominator.values),
            self.count + other.count,
            self.iod_total + other.iod_total,
        )


@dataclass(frozen=True, eq=False)
class MosseFilter:
    """Finalized filter H* with its spatial kernel and scale/pose metadata"""

    freq: FrequencyGrid
    spatial: Image
    octave: float
    pose_bin: PoseBin = PoseBin.FRONTAL
    train_count: int = 1

    def __post_init__(self):
        if not MIN_OCTAVE <= self.octave <= MAX_OCTAVE:
            raise AnnotationError(f"filter octave {self.octave:.3f} outside [{MIN_OCTAVE}, {MAX_OCTAVE}]")

    @property
    def filter_id(self) -> FilterId:
        return (self.octave, self.pose_bin)

    @property
    def nominal_iod(self) -> float:
        return 2.0 ** self.octave

    @property
    def width(self) -> int:
        return self.freq.width

    @property
    def height(self) -> int:
        return self.freq.height

    def quantized(self) -> "MosseFilter":
        """Single-precision copy, the precision banks are stored at"""
        return MosseFilter(FrequencyGrid(self.freq.values.astype(np.complex64)),
                           Image(self.spatial.pixels.astype(np.float32)),
                           self.octave, self.pose_bin, self.train_count)

    def template(self, crop: Tuple[float, float] = DEFAULT_CROP) -> Image:
        """Face template cropped from the centred spatial filter at the nominal IOD"""
        centred = np.fft.fftshift(self.spatial.pixels)
        height, width = centred.shape
        size = crop_size(self.nominal_iod, crop)
        rect = rect_around((width // 2, height // 2), size).fit_to(width, height)
        return Image(centred[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w])


def _spatial_kernel(freq: np.ndarray) -> Image:
    # Correlating with h reproduces F * H*, so h = IDFT(conj(H*))
    return Image(np.real(np.fft.ifft2(np.conj(freq))))


def _training_spectra(frame: Image, ann: EyeAnnotation, sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    if not ann.inside(frame.width, frame.height):
        raise AnnotationError(f"annotation {ann} outside {frame.width}x{frame.height} frame")
    f_hat = forward_dft(preprocess(frame)).values
    g_hat = forward_dft(gaussian_goal(frame.width, frame.height, ann.center, sigma)).values
    return f_hat, g_hat


def accumulate(acc: MosseAccumulator, frame: Image, ann: EyeAnnotation, sigma: float) -> MosseAccumulator:
    """Add one training frame: numerator += G * conj(F), denominator += F * conj(F)"""
    if (frame.width, frame.height) != acc.dims:
        raise DimensionMismatchError(f"frame {frame.width}x{frame.height} does not match "
                                     f"accumulator {acc.dims[0]}x{acc.dims[1]}")
    f_hat, g_hat = _training_spectra(frame, ann, sigma)
    return MosseAccumulator(
        FrequencyGrid(acc.numerator.values + g_hat * np.conj(f_hat)),
        FrequencyGrid(acc.denominator.values + _power_spectrum(f_hat)),
        acc.count + 1,
        acc.iod_total + ann.interocular,
    )


def regularization(acc: MosseAccumulator, epsilon: Optional[float], epsilon_scale: float = 0.01) -> float:
    """Explicit epsilon, or a fraction of the mean denominator energy"""
    if epsilon is not None:
        return float(epsilon)
    return float(epsilon_scale * np.mean(acc.denominator.values.real))


def finalize(acc: MosseAccumulator,
             epsilon: Optional[float] = None,
             epsilon_scale: float = 0.01,
             octave: Optional[float] = None,
             pose_bin: PoseBin = PoseBin.FRONTAL) -> MosseFilter:
    """
    Solve for the MOSSE filter H* = sum(G conj F) / (sum(F conj F) + epsilon)

    Args:
        acc: Accumulator with at least one frame
        epsilon: Regularization; None selects epsilon_scale * mean denominator
        epsilon_scale: Fraction used when epsilon is None
        octave: Filter scale; defaults to log2 of the mean training IOD
        pose_bin: Pose bin recorded on the filter

    Returns:
        MosseFilter
    """
    if acc.count < 1:
        raise EmptyAccumulatorError("cannot finalize an accumulator with no frames")

    eps = regularization(acc, epsilon, epsilon_scale)
    if eps < 0:
        raise ConfigConflictError(f"epsilon must be >= 0, got {eps}")
    denominator = acc.denominator.values
    if eps == 0 and np.any(denominator.real == 0):
        zeros = int(np.count_nonzero(denominator.real == 0))
        raise DivisionDegenerateError(f"{zeros} zero denominator bins with epsilon = 0")

    h_conj = acc.numerator.values / (denominator + eps)
    if octave is None:
        octave = math.log2(acc.iod_total / acc.count)
    return MosseFilter(FrequencyGrid(h_conj), _spatial_kernel(h_conj), float(octave), pose_bin, acc.count)


def exact_filter(frame: Image, ann: EyeAnnotation, sigma: float,
                 pose_bin: PoseBin = PoseBin.FRONTAL) -> MosseFilter:
    """Per-image filter H* = G / F that reproduces the goal image exactly"""
    f_hat, g_hat = _training_spectra(frame, ann, sigma)
    if np.any(f_hat == 0):
        raise ZeroBinError(f"{int(np.count_nonzero(f_hat == 0))} zero DFT bins; exact filter undefined")
    h_conj = g_hat / f_hat
    return MosseFilter(FrequencyGrid(h_conj), _spatial_kernel(h_conj), ann.octave, pose_bin, 1)


# ---------------------------------------------------------------------------
# Filter banks

@dataclass(frozen=True)
class BankGrid:
    """Scale x pose grid a bank covers"""

    octaves: Tuple[float, ...]
    poses: Tuple[PoseBin, ...] = (PoseBin.LEFT, PoseBin.FRONTAL, PoseBin.RIGHT)
    crop: Tuple[float, float] = DEFAULT_CROP

    def __post_init__(self):
        octaves = tuple(sorted(float(o) for o in self.octaves))
        poses = tuple(sorted((PoseBin(p) for p in self.poses), key=lambda p: p.order))
        if not octaves or not poses:
            raise ConfigConflictError("bank grid needs at least one octave and one pose")
        if len(set(octaves)) != len(octaves) or len(set(poses)) != len(poses):
            raise ConfigConflictError("bank grid has duplicate octaves or poses")
        for octave in octaves:
            if not MIN_OCTAVE <= octave <= MAX_OCTAVE:
                raise ConfigConflictError(f"grid octave {octave} outside [{MIN_OCTAVE}, {MAX_OCTAVE}]")
        object.__setattr__(self, "octaves", octaves)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "crop", (float(self.crop[0]), float(self.crop[1])))

    @classmethod
    def default(cls) -> "BankGrid":
        """Quarter-octave scales 4.0 .. 7.0 x three poses: 39 cells"""
        return cls(octaves=tuple(4.0 + 0.25 * i for i in range(13)))

    def cells(self) -> List[FilterId]:
        return [(octave, pose) for octave in self.octaves for pose in self.poses]

    def nearest_octave(self, octave: float) -> Optional[float]:
        """Nearest grid octave, ties toward the lower one; None when more than half an octave away"""
        best = min(self.octaves, key=lambda o: (abs(o - octave), o))
        return best if abs(best - octave) <= 0.5 else None

    def to_dict(self) -> Dict:
        return {"octaves": list(self.octaves),
                "poses": [p.value for p in self.poses],
                "crop": list(self.crop)}

    @classmethod
    def from_dict(cls, data: Dict) -> "BankGrid":
        return cls(octaves=tuple(data["octaves"]),
                   poses=tuple(PoseBin(p) for p in data["poses"]),
                   crop=tuple(data.get("crop", DEFAULT_CROP)))


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Ordered filters plus the face templates cropped from them"""

    filters: Tuple[MosseFilter, ...]
    templates: Tuple[Image, ...]
    grid: BankGrid
    sigma: float
    epsilon: Optional[float] = None
    epsilon_scale: float = 0.01
    cell_counts: Dict[str, int] = field(default_factory=dict)
    config_hash: Optional[str] = None
    corpus_hash: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(self.filters))
        object.__setattr__(self, "templates", tuple(self.templates))
        if len(self.filters) != len(self.templates):
            raise BankIntegrityError(f"{len(self.filters)} filters but {len(self.templates)} templates")
        ids = [f.filter_id for f in self.filters]
        if len(set(ids)) != len(ids):
            raise BankIntegrityError("bank has duplicate (octave, pose) cells")

    def __len__(self) -> int:
        return len(self.filters)

    def __iter__(self):
        return iter(zip(self.filters, self.templates))

    def manifest(self) -> Dict:
        return {
            "format": BANK_MAGIC.decode("ascii"),
            "version": BANK_VERSION,
            "grid": self.grid.to_dict(),
            "sigma": self.sigma,
            "epsilon": self.epsilon,
            "epsilon_scale": self.epsilon_scale,
            "crop": list(self.grid.crop),
            "filter_count": len(self.filters),
            "filters": [{"octave": f.octave, "pose": f.pose_bin.value, "train_count": f.train_count}
                        for f in self.filters],
            "cell_counts": dict(sorted(self.cell_counts.items())),
            "config_hash": self.config_hash,
            "corpus_hash": self.corpus_hash,
        }


def cell_key(octave: float, pose: PoseBin) -> str:
    return f"{octave:g}/{pose.value}"


def bin_samples(samples: Sequence[AnnotatedSample], grid: BankGrid) -> Dict[FilterId, List[AnnotatedSample]]:
    """Assign samples to grid cells by nearest octave and pose bin"""
    cells: Dict[FilterId, List[AnnotatedSample]] = {cell: [] for cell in grid.cells()}
    skipped = 0
    for sample in samples:
        octave = grid.nearest_octave(sample.octave)
        cell = (octave, sample.pose_bin)
        if octave is None or cell not in cells:
            skipped += 1
            continue
        cells[cell].append(sample)
    if skipped:
        logger.warning(f"{skipped} samples fall outside the bank grid and were skipped")
    return cells


def _pad_frame(image: Image, width: int, height: int) -> Image:
    if (image.width, image.height) == (width, height):
        return image
    return Image(np.pad(image.pixels, ((0, height - image.height), (0, width - image.width)), mode="edge"))


def train_accumulator(samples: Sequence[AnnotatedSample], sigma: float, workers: int = 1) -> MosseAccumulator:
    """
    Accumulate a cell's samples; frames of different sizes are edge-padded to the largest

    With workers > 1 the samples are split into shards, each shard builds a
    private accumulator, and the shards are merged in order.
    """
    width = max(s.image.width for s in samples)
    height = max(s.image.height for s in samples)

    def run_shard(shard: Sequence[AnnotatedSample]) -> MosseAccumulator:
        acc = MosseAccumulator.empty(width, height)
        for sample in shard:
            acc = accumulate(acc, _pad_frame(sample.image, width, height), sample.annotation, sigma)
        return acc

    n_shards = max(1, min(workers, len(samples)))
    if n_shards == 1:
        return run_shard(samples)

    bounds = np.linspace(0, len(samples), n_shards + 1).astype(int)
    shards = [samples[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=n_shards) as pool:
        partials = list(pool.map(run_shard, shards))
    total = partials[0]
    for partial in partials[1:]:
        total = total.merge(partial)
    return total


def build_bank(samples: Sequence[AnnotatedSample],
               grid: Optional[BankGrid] = None,
               sigma: float = 2.0,
               epsilon: Optional[float] = None,
               epsilon_scale: float = 0.01,
               workers: int = 1,
               progress: bool = False,
               config_hash: Optional[str] = None,
               corpus_hash: Optional[str] = None) -> FilterBank:
    """
    Train one MOSSE filter per grid cell and crop its face template

    Args:
        samples: Annotated training frames
        grid: Scale x pose grid (default: 13 quarter-octaves x 3 poses)
        sigma: Goal-image sigma in pixels
        epsilon: Regularization; None selects epsilon_scale * mean denominator
        epsilon_scale: Fraction used when epsilon is None
        workers: Threads per cell for sharded accumulation
        progress: Show a progress bar
        config_hash: Hash of the producing config, embedded in the manifest
        corpus_hash: Hash of the training corpus, when known

    Returns:
        FilterBank in grid cell order
    """
    grid = grid or BankGrid.default()
    cells = bin_samples(samples, grid)

    for (octave, pose), members in cells.items():
        if not members:
            raise EmptyCellError(octave, pose.value)

    counts = {cell_key(o, p): len(m) for (o, p), m in cells.items()}
    logger.info(f"📊 Training {len(cells)} filters; samples per cell: "
                f"min {min(counts.values())}, max {max(counts.values())}")

    filters, templates = [], []
    for (octave, pose), members in tqdm(cells.items(), desc="Training filters", disable=not progress):
        acc = train_accumulator(members, sigma, workers)
        filt = finalize(acc, epsilon, epsilon_scale, octave=octave, pose_bin=pose).quantized()
        filters.append(filt)
        templates.append(filt.template(grid.crop))
        logger.debug(f"Cell {cell_key(octave, pose)}: {acc.count} frames, {filt.width}x{filt.height}")

    logger.info(f"✅ Bank trained: {len(filters)} filters")
    return FilterBank(tuple(filters), tuple(templates), grid, sigma, epsilon, epsilon_scale,
                      counts, config_hash, corpus_hash)


# ---------------------------------------------------------------------------
# CFAD bank files

def _pack_filter(filt: MosseFilter, template: Image) -> bytes:
    buffer = io.BytesIO()
    buffer.write(struct.pack("<II", filt.width, filt.height))
    interleaved = np.stack([filt.freq.values.real, filt.freq.values.imag], axis=-1)
    buffer.write(interleaved.astype("<f4").tobytes())
    buffer.write(filt.spatial.pixels.astype("<f4").tobytes())
    buffer.write(struct.pack("<II", template.width, template.height))
    buffer.write(template.pixels.astype("<f4").tobytes())
    payload = buffer.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_bank(bank: FilterBank, path) -> Path:
    """
    Write a bank as CFAD: magic, u16 version, length-prefixed JSON manifest,
    then one CRC32-protected payload per filter
    """
    bank_path = Path(path)
    bank_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = json.dumps(bank.manifest(), sort_keys=True).encode("utf-8")

    with open(bank_path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<H", BANK_VERSION))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for filt, template in bank:
            f.write(_pack_filter(filt, template))

    logger.info(f"💾 Saved {len(bank)} filters to {bank_path}")
    return bank_path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.position = 0

    def take(self, size: int, what: str) -> bytes:
        if self.position + size > len(self.data):
            raise BankTruncatedError(f"file ends inside {what}")
        chunk = self.data[self.position:self.position + size]
        self.position += size
        return chunk

    @property
    def remaining(self) -> int:
        return len(self.data) - self.position


def _filter_meta(meta, index: int) -> Tuple[float, PoseBin, int]:
    if not isinstance(meta, dict):
        raise BankFormatError(f"manifest entry for filter {index} is not an object")
    missing = [key for key in FILTER_KEYS if key not in meta]
    if missing:
        raise BankFormatError(f"manifest entry for filter {index} lacks {', '.join(missing)}")
    try:
        octave = float(meta["octave"])
        pose = PoseBin(meta["pose"])
        train_count = int(meta["train_count"])
    except (TypeError, ValueError) as e:
        raise BankFormatError(f"bad manifest entry for filter {index}: {e}") from e
    if not MIN_OCTAVE <= octave <= MAX_OCTAVE:
        raise BankFormatError(f"filter {index} octave {octave} outside [{MIN_OCTAVE}, {MAX_OCTAVE}]")
    return octave, pose, train_count


def _read_filter(reader: _Reader, meta: Tuple[float, PoseBin, int], index: int) -> Tuple[MosseFilter, Image]:
    start = reader.position
    width, height = struct.unpack("<II", reader.take(8, f"filter {index} dims"))
    freq = np.frombuffer(reader.take(width * height * 8, f"filter {index} spectrum"), dtype="<f4")
    freq = freq.reshape(height, width, 2)
    spatial = np.frombuffer(reader.take(width * height * 4, f"filter {index} kernel"), dtype="<f4")
    t_width, t_height = struct.unpack("<II", reader.take(8, f"template {index} dims"))
    template = np.frombuffer(reader.take(t_width * t_height * 4, f"template {index}"), dtype="<f4")
    payload = reader.data[start:reader.position]
    (crc,) = struct.unpack("<I", reader.take(4, f"filter {index} checksum"))
    if zlib.crc32(payload) != crc:
        raise BankIntegrityError(f"checksum mismatch in filter {index}")

    values = (freq[..., 0].astype(np.float32) + 1j * freq[..., 1].astype(np.float32)).astype(np.complex64)
    octave, pose, train_count = meta
    filt = MosseFilter(FrequencyGrid(values),
                       Image(spatial.reshape(height, width).astype(np.float32)),
                       octave, pose, train_count)
    return filt, Image(template.reshape(t_height, t_width).astype(np.float32))


def _parse_manifest(manifest) -> Tuple[BankGrid, float, Optional[float], float, List[Tuple[float, PoseBin, int]]]:
    """Validated grid, sigma, epsilon, epsilon scale and per-filter metadata"""
    if not isinstance(manifest, dict):
        raise BankFormatError("bank manifest is not a JSON object")
    missing = [key for key in MANIFEST_KEYS if key not in manifest]
    if missing:
        raise BankFormatError(f"bank manifest lacks {', '.join(missing)}")
    entries = manifest["filters"]
    if not isinstance(entries, list):
        raise BankFormatError("bank manifest 'filters' is not a list")
    if manifest["filter_count"] != len(entries):
        raise BankIntegrityError(f"manifest declares {manifest['filter_count']} filters but lists {len(entries)}")
    try:
        grid = BankGrid.from_dict(manifest["grid"])
        sigma = float(manifest["sigma"])
        epsilon = manifest.get("epsilon")
        epsilon = None if epsilon is None else float(epsilon)
        epsilon_scale = float(manifest.get("epsilon_scale", 0.01))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        # ConfigConflictError from BankGrid is a ValueError too
        raise BankFormatError(f"bad bank manifest: {e}") from e
    return grid, sigma, epsilon, epsilon_scale, [_filter_meta(meta, i) for i, meta in enumerate(entries)]


def load_bank(path) -> FilterBank:
    """Read a CFAD bank; format, truncation and integrity problems raise distinct errors"""
    bank_path = Path(path)
    if not bank_path.exists():
        raise FileNotFoundError(f"bank file not found: {bank_path}")
    reader = _Reader(bank_path.read_bytes())

    if reader.remaining < 4 or reader.take(4, "magic") != BANK_MAGIC:
        raise BankFormatError(f"{bank_path} is not a CFAD bank file")
    (version,) = struct.unpack("<H", reader.take(2, "version"))
    if version != BANK_VERSION:
        raise BankFormatError(f"unsupported bank format version {version} (expected {BANK_VERSION})")
    (manifest_length,) = struct.unpack("<I", reader.take(4, "manifest length"))
    try:
        manifest = json.loads(reader.take(manifest_length, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BankFormatError(f"unreadable bank manifest: {e}") from e

    grid, sigma, epsilon, epsilon_scale, entries = _parse_manifest(manifest)
    declared = len(entries)
    cell_counts = manifest.get("cell_counts") or {}
    if not isinstance(cell_counts, dict):
        raise BankFormatError("bank manifest 'cell_counts' is not an object")

    filters, templates = [], []
    for index, meta in enumerate(entries):
        if reader.remaining == 0:
            raise BankIntegrityError(f"manifest declares {declared} filters, file holds {index}")
        filt, template = _read_filter(reader, meta, index)
        filters.append(filt)
        templates.append(template)
    if reader.remaining:
        raise BankIntegrityError(f"{reader.remaining} unexpected bytes after {declared} filter payloads")

    return FilterBank(tuple(filters), tuple(templates), grid, sigma, epsilon, epsilon_scale,
                      cell_counts, manifest.get("config_hash"), manifest.get("corpus_hash"))
