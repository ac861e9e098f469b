"""
Image core for CorrFaD

Grayscale images, binary PGM I/O, the MOSSE preprocessing chain, the DFT
contract every other module relies on, Gaussian goal images and the shared
face geometry (eye annotations, face rectangles, pose bins).
"""

import logging
import math
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from errors import (
    AnnotationError,
    ConfigConflictError,
    DegenerateInputError,
    ImageNotFoundError,
    MalformedHeaderError,
    UnsupportedBitDepthError,
)

logger = logging.getLogger(__name__)

Point = Tuple[float, float]

# Default crop rule: face centre +/- 1.0 IOD horizontally, +/- 1.25 IOD vertically
DEFAULT_CROP = (1.0, 1.25)

POSE_LIMIT_DEGREES = 12.0

ANNOTATION_COLUMNS = ["path", "left_x", "left_y", "right_x", "right_y"]


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Image:
    """2-D grayscale raster, rows x columns, float pixels"""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        dtype = np.float32 if pixels.dtype == np.float32 else np.float64
        pixels = np.array(pixels, dtype=dtype, copy=True)
        if pixels.ndim != 2 or pixels.size == 0:
            raise DegenerateInputError(f"image must be a non-empty 2-D grid, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise DegenerateInputError("image contains NaN or Inf values")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape

    def __repr__(self) -> str:
        return f"Image({self.width}x{self.height})"


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """
    Complex 2-D DFT of an Image

    `pad` records how many zero rows/columns were appended (bottom/right) to
    the originating image before the transform; `inverse_dft` crops them off.
    """

    values: np.ndarray
    pad: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        values = np.asarray(self.values)
        # Single precision is kept as-is so stored banks round-trip exactly
        dtype = np.complex64 if values.dtype == np.complex64 else np.complex128
        values = np.array(values, dtype=dtype, copy=True)
        if values.ndim != 2:
            raise DegenerateInputError(f"frequency grid must be 2-D, got shape {values.shape}")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


class PoseBin(Enum):
    """Yaw ranges used to partition training data; declaration order is the tie order"""

    LEFT = "LEFT"
    FRONTAL = "FRONTAL"
    RIGHT = "RIGHT"

    @property
    def order(self) -> int:
        return list(PoseBin).index(self)

    @classmethod
    def from_degrees(cls, degrees: Optional[float]) -> "PoseBin":
        if degrees is None or (isinstance(degrees, float) and math.isnan(degrees)):
            return cls.FRONTAL
        if degrees < -POSE_LIMIT_DEGREES:
            return cls.LEFT
        if degrees > POSE_LIMIT_DEGREES:
            return cls.RIGHT
        return cls.FRONTAL


@dataclass(frozen=True)
class EyeAnnotation:
    """Ground-truth eye centres in pixel coordinates (x, y)"""

    left_eye: Point
    right_eye: Point

    def __post_init__(self):
        object.__setattr__(self, "left_eye", (float(self.left_eye[0]), float(self.left_eye[1])))
        object.__setattr__(self, "right_eye", (float(self.right_eye[0]), float(self.right_eye[1])))
        if not self.interocular > 0:
            raise AnnotationError(f"eyes must be distinct points, got {self.left_eye} and {self.right_eye}")

    @property
    def interocular(self) -> float:
        return math.hypot(self.right_eye[0] - self.left_eye[0], self.right_eye[1] - self.left_eye[1])

    @property
    def center(self) -> Point:
        """Midpoint between the eyes"""
        return ((self.left_eye[0] + self.right_eye[0]) / 2.0,
                (self.left_eye[1] + self.right_eye[1]) / 2.0)

    @property
    def octave(self) -> float:
        return math.log2(self.interocular)

    def shifted(self, dx: float, dy: float) -> "EyeAnnotation":
        return EyeAnnotation((self.left_eye[0] + dx, self.left_eye[1] + dy),
                             (self.right_eye[0] + dx, self.right_eye[1] + dy))

    def scaled(self, fx: float, fy: float) -> "EyeAnnotation":
        return EyeAnnotation((self.left_eye[0] * fx, self.left_eye[1] * fy),
                             (self.right_eye[0] * fx, self.right_eye[1] * fy))

    def inside(self, width: int, height: int) -> bool:
        return all(0 <= x <= width - 1 and 0 <= y <= height - 1
                   for x, y in (self.left_eye, self.right_eye))


@dataclass(frozen=True)
class FaceRect:
    """Axis-aligned face rectangle: top-left (x, y), size (w, h)"""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise AnnotationError(f"face rect needs w, h > 0, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> Point:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def intersection_area(self, other: "FaceRect") -> int:
        ix = max(0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        return ix * iy

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def fit_to(self, width: int, height: int) -> "FaceRect":
        """Shift the rect inside the image, clipping only when it is larger than the image"""
        w, h = min(self.w, width), min(self.h, height)
        x = min(max(self.x, 0), width - w)
        y = min(max(self.y, 0), height - h)
        return FaceRect(int(x), int(y), int(w), int(h))

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def crop_size(iod: float, crop: Tuple[float, float] = DEFAULT_CROP) -> Tuple[int, int]:
    """Template (w, h) for a face with the given interocular distance"""
    hx, hy = crop
    return max(1, round_half_up(2.0 * hx * iod)), max(1, round_half_up(2.0 * hy * iod))


def rect_around(center: Point, size: Tuple[int, int]) -> FaceRect:
    """Rect of the given size whose centre pixel is the rounded `center`"""
    w, h = size
    return FaceRect(round_half_up(center[0]) - w // 2, round_half_up(center[1]) - h // 2, w, h)


def face_rect(ann: EyeAnnotation, crop: Tuple[float, float] = DEFAULT_CROP) -> FaceRect:
    """Ground-truth face rectangle; the same rule crops templates from filters"""
    return rect_around(ann.center, crop_size(ann.interocular, crop))


@dataclass(frozen=True, eq=False)
class AnnotatedSample:
    """One annotated frame of a dataset"""

    key: str
    image: Image
    annotation: EyeAnnotation
    pose_degrees: Optional[float] = None

    @property
    def octave(self) -> float:
        return self.annotation.octave

    @property
    def pose_bin(self) -> PoseBin:
        return PoseBin.from_degrees(self.pose_degrees)

    def rect(self, crop: Tuple[float, float] = DEFAULT_CROP) -> FaceRect:
        return face_rect(self.annotation, crop)


# ---------------------------------------------------------------------------
# PGM I/O

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)")


def load_image(path) -> Image:
    """
    Read a binary PGM (P5, 8-bit) file

    Args:
        path: File path

    Returns:
        Image with pixels scaled to [0, 1] by the header's max value
    """
    image_path = Path(path)
    if not image_path.exists():
        raise ImageNotFoundError(f"image not found: {image_path}")

    data = image_path.read_bytes()
    tokens = []
    position = 0
    for _ in range(4):
        match = _HEADER_TOKEN.match(data, position)
        if not match:
            raise MalformedHeaderError(f"{image_path}: incomplete PGM header")
        tokens.append(match.group(1))
        position = match.end()

    if tokens[0] != b"P5":
        raise MalformedHeaderError(f"{image_path}: unsupported magic {tokens[0][:8]!r}, expected P5")
    try:
        width, height, max_value = (int(token) for token in tokens[1:])
    except ValueError as e:
        raise MalformedHeaderError(f"{image_path}: non-numeric header field") from e
    if width <= 0 or height <= 0 or max_value <= 0:
        raise MalformedHeaderError(f"{image_path}: invalid header values {width}x{height} max {max_value}")
    if max_value > 255:
        raise UnsupportedBitDepthError(f"{image_path}: max value {max_value} needs 16-bit samples; "
                                       "only 8-bit PGM is supported")

    # Exactly one whitespace byte separates the header from the raster
    if position >= len(data) or not data[position:position + 1].isspace():
        raise MalformedHeaderError(f"{image_path}: missing separator after header")
    raster = data[position + 1:position + 1 + width * height]
    if len(raster) != width * height:
        raise MalformedHeaderError(f"{image_path}: raster has {len(raster)} bytes, "
                                   f"expected {width * height}")

    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return Image(pixels.astype(np.float64) / float(max_value))


def save_image(img: Image, path) -> Path:
    """Write an Image as binary 8-bit PGM; values are clipped to [0, 1]"""
    image_path = Path(path)
    image_path.parent.mkdir(parents=True, exist_ok=True)
    levels = np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    image_path.write_bytes(header + levels.tobytes())
    return image_path


# ---------------------------------------------------------------------------
# Preprocessing

def log_transform(img: Image) -> Image:
    """ln(1 + p); input pixels must be non-negative"""
    if np.min(img.pixels) < 0:
        raise DegenerateInputError("log transform needs non-negative pixels")
    return Image(np.log1p(img.pixels))


def normalize(img: Image) -> Image:
    """Shift to zero mean and scale to unit L2 norm"""
    centred = img.pixels - img.pixels.mean()
    norm = float(np.linalg.norm(centred))
    if norm <= 1e-12 * max(1.0, float(np.abs(img.pixels).max())):
        raise DegenerateInputError("image is constant; cannot normalize to unit norm")
    return Image(centred / norm)


def cosine_window(width: int, height: int) -> np.ndarray:
    """Separable 2-D Hann window, zero on the border rows and columns"""
    return np.outer(np.hanning(height), np.hanning(width))


def apply_window(img: Image) -> Image:
    return Image(img.pixels * cosine_window(img.width, img.height))


def preprocess(img: Image) -> Image:
    """Log transform, zero-mean/unit-norm normalization, then cosine window"""
    return apply_window(normalize(log_transform(img)))


# ---------------------------------------------------------------------------
# DFT

def forward_dft(img: Image, shape: Optional[Tuple[int, int]] = None) -> FrequencyGrid:
    """
    2-D DFT of an image

    Args:
        img: Source image
        shape: Optional (height, width) to zero-pad to (bottom/right)

    Returns:
        FrequencyGrid with the padding recorded
    """
    pixels = img.pixels
    pad = (0, 0)
    if shape is not None and tuple(shape) != pixels.shape:
        rows, cols = shape
        if rows < pixels.shape[0] or cols < pixels.shape[1]:
            raise DegenerateInputError(f"cannot pad {pixels.shape} down to {shape}")
        pad = (cols - pixels.shape[1], rows - pixels.shape[0])
        pixels = np.pad(pixels, ((0, pad[1]), (0, pad[0])))
    return FrequencyGrid(np.fft.fft2(pixels), pad=pad)


def inverse_dft(grid: FrequencyGrid) -> Image:
    """Inverse of `forward_dft`; padding recorded on the grid is cropped off"""
    spatial = np.real(np.fft.ifft2(grid.values))
    pad_x, pad_y = grid.pad
    return Image(spatial[:spatial.shape[0] - pad_y, :spatial.shape[1] - pad_x])


def gaussian_goal(width: int, height: int, center: Point, sigma: float) -> Image:
    """Idealized output: a Gaussian impulse with peak 1 at `center`"""
    cx, cy = center
    if not (0 <= cx <= width - 1 and 0 <= cy <= height - 1):
        raise AnnotationError(f"goal centre {center} outside {width}x{height} image")
    if sigma <= 0:
        raise DegenerateInputError(f"sigma must be > 0, got {sigma}")
    xs = np.arange(width, dtype=np.float64) - cx
    ys = np.arange(height, dtype=np.float64) - cy
    return Image(np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma ** 2)))


# ---------------------------------------------------------------------------
# Resampling

def resample(img: Image, factor: float) -> Image:
    """Bilinear downscale by `factor` (<= 1); upsampling is refused"""
    if factor > 1.0 + 1e-12:
        raise ConfigConflictError(f"refusing to upsample by factor {factor:.4f}")
    if abs(factor - 1.0) <= 1e-12:
        return img
    out = ndimage.zoom(img.pixels, factor, order=1, mode="nearest")
    return Image(np.clip(out, 0.0, None))


def resample_sample(sample: AnnotatedSample, factor: float) -> AnnotatedSample:
    """Downscale a sample; eye coordinates follow the corner-aligned zoom grid"""
    scaled = resample(sample.image, factor)
    fx = (scaled.width - 1) / (sample.image.width - 1) if sample.image.width > 1 else factor
    fy = (scaled.height - 1) / (sample.image.height - 1) if sample.image.height > 1 else factor
    return replace(sample, image=scaled, annotation=sample.annotation.scaled(fx, fy))


# ---------------------------------------------------------------------------
# Annotation CSV

def load_annotations(csv_path, load_images: bool = True) -> List[AnnotatedSample]:
    """
    Load an annotated image set

    CSV columns: path,left_x,left_y,right_x,right_y[,pose_degrees]; image
    paths resolve relative to the CSV's directory.

    Args:
        csv_path: Annotation CSV
        load_images: Read the referenced PGM files

    Returns:
        List of AnnotatedSample in file order
    """
    csv_file = Path(csv_path)
    if not csv_file.exists():
        raise FileNotFoundError(f"annotation file not found: {csv_file}")

    frame = pd.read_csv(csv_file, encoding="utf-8", float_precision="round_trip")
    missing = [c for c in ANNOTATION_COLUMNS if c not in frame.columns]
    if missing:
        raise AnnotationError(f"{csv_file}: missing columns {missing}")
    has_pose = "pose_degrees" in frame.columns

    samples = []
    for row in frame.itertuples(index=False):
        image = load_image(csv_file.parent / row.path) if load_images else None
        annotation = EyeAnnotation((row.left_x, row.left_y), (row.right_x, row.right_y))
        if image is not None and not annotation.inside(image.width, image.height):
            raise AnnotationError(f"{row.path}: eyes outside the {image.width}x{image.height} frame")
        pose = float(row.pose_degrees) if has_pose and not pd.isna(row.pose_degrees) else None
        samples.append(AnnotatedSample(key=str(row.path), image=image,
                                       annotation=annotation, pose_degrees=pose))

    logger.info(f"Loaded {len(samples)} annotated samples from {csv_file}")
    return samples


def save_annotations(samples: List[AnnotatedSample], csv_path) -> Path:
    """Write the annotation CSV for samples whose keys are paths relative to the CSV"""
    csv_file = Path(csv_path)
    csv_file.parent.mkdir(parents=True, exist_ok=True)
    rows = [{
        "path": s.key,
        "left_x": s.annotation.left_eye[0],
        "left_y": s.annotation.left_eye[1],
        "right_x": s.annotation.right_eye[0],
        "right_y": s.annotation.right_eye[1],
        "pose_degrees": s.pose_degrees,
    } for s in samples]
    frame = pd.DataFrame(rows, columns=ANNOTATION_COLUMNS + ["pose_degrees"])
    frame.to_csv(csv_file, index=False, encoding="utf-8", lineterminator="\n")
    return csv_file
