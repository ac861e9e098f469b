"""
Correlation back ends

Frequency-domain filter application, spatial normalized cross-correlation,
whole-image Fourier matching, peak finding and peak-to-sidelobe ratio.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.signal import fftconvolve

from errors import (
    DegenerateSurfaceError,
    DimensionMismatchError,
    SurfaceTooLargeError,
    TemplateSizeError,
    ZeroTemplateError,
)
from imagecore import FrequencyGrid, Image, forward_dft, inverse_dft, preprocess
from mosse import MosseFilter

logger = logging.getLogger(__name__)

DEFAULT_MAX_DIM = 4096
PSR_WINDOW = 5

# Window energies at or below this fraction of the largest one count as empty
_ZERO_ENERGY = 1e-10


@dataclass(frozen=True, eq=False)
class CorrelationSurface:
    """
    Correlation output

    Surface coordinate (sx, sy) maps to source-image coordinate
    (sx + dx, sy + dy) with (dx, dy) = origin_offset. Circular surfaces wrap
    at the image border.
    """

    values: np.ndarray
    origin_offset: Tuple[int, int] = (0, 0)
    circular: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2 or values.size == 0:
            raise DegenerateSurfaceError(f"surface must be a non-empty 2-D grid, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DegenerateSurfaceError("surface contains NaN or Inf values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def to_source(self, x: int, y: int) -> Tuple[int, int]:
        return (x + self.origin_offset[0], y + self.origin_offset[1])


@dataclass(frozen=True)
class PsrScore:
    """Peak-to-sidelobe ratio: (peak - mean) / sigma over the sidelobe"""

    peak_value: float
    peak_xy: Tuple[int, int]
    mean: float
    sigma: float
    psr: float


def _wrapped_offsets(n: int) -> np.ndarray:
    # Index v is offset v below ceil(n/2), offset v - n above
    idx = np.arange(n)
    return np.where(idx < (n + 1) // 2, idx, idx - n)


def embed_kernel(kernel: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """
    Place a wrapped-layout kernel into a larger grid, preserving signed offsets

    Args:
        kernel: 2-D kernel with offset 0 at [0, 0]
        shape: Target (height, width)

    Returns:
        Wrapped-layout kernel of the target shape
    """
    kernel = np.asarray(kernel)
    rows, cols = shape
    if kernel.shape[0] > rows or kernel.shape[1] > cols:
        raise DimensionMismatchError(f"kernel {kernel.shape} does not fit into {tuple(shape)}")
    if kernel.shape == tuple(shape):
        return np.array(kernel, copy=True)
    out = np.zeros(shape, dtype=kernel.dtype)
    ys = _wrapped_offsets(kernel.shape[0]) % rows
    xs = _wrapped_offsets(kernel.shape[1]) % cols
    out[np.ix_(ys, xs)] = kernel
    return out


def freq_correlate(img: Image, filt: MosseFilter, max_dim: int = DEFAULT_MAX_DIM) -> CorrelationSurface:
    """
    Apply a filter in the frequency domain: IDFT(DFT(preprocess(img)) * H*)

    The result is a circular correlation the size of the image. When the
    filter is larger than the image, the preprocessed image is zero-padded
    bottom/right and the surface is cropped back; when it is smaller, its
    spatial kernel is embedded into the image grid.

    Args:
        img: Source image
        filt: Filter to apply
        max_dim: Largest accepted correlation dimension

    Returns:
        Circular CorrelationSurface with origin offset (0, 0)
    """
    rows = max(img.height, filt.height)
    cols = max(img.width, filt.width)
    if rows > max_dim or cols > max_dim:
        raise SurfaceTooLargeError(f"correlation size {cols}x{rows} exceeds the {max_dim} pixel limit")

    f_hat = forward_dft(preprocess(img), shape=(rows, cols))
    if filt.freq.shape == (rows, cols):
        h_conj = filt.freq.values
    else:
        kernel = embed_kernel(filt.spatial.pixels.astype(np.float64), (rows, cols))
        h_conj = np.conj(np.fft.fft2(kernel))

    response = inverse_dft(FrequencyGrid(f_hat.values * h_conj, pad=f_hat.pad))
    return CorrelationSurface(response.pixels, origin_offset=(0, 0), circular=True)


def _window_sums(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Valid-mode sums over every height x width window, via an integral image"""
    integral = np.zeros((values.shape[0] + 1, values.shape[1] + 1), dtype=np.float64)
    integral[1:, 1:] = np.cumsum(np.cumsum(values, axis=0), axis=1)
    return (integral[height:, width:] - integral[:-height, width:]
            - integral[height:, :-width] + integral[:-height, :-width])


def spatial_ncc(img: Image, tmpl: Image, mean_subtracted: bool = False) -> CorrelationSurface:
    """
    Normalized cross-correlation over valid template placements

    NCC(x, y) = sum T * I_window / sqrt(sum T^2 * sum I_window^2). With
    `mean_subtracted`, template and windows are zero-meaned first (the
    correlation coefficient). Windows with no energy score 0.

    Args:
        img: Image searched
        tmpl: Template, no larger than the image in either dimension
        mean_subtracted: Use the correlation-coefficient variant

    Returns:
        Surface of size (W - w + 1) x (H - h + 1); value at (x, y) is the
        score with the template's top-left at (x, y)
    """
    if tmpl.width > img.width or tmpl.height > img.height:
        raise TemplateSizeError(f"template {tmpl.width}x{tmpl.height} larger than image "
                                f"{img.width}x{img.height}")

    image = img.pixels.astype(np.float64)
    template = tmpl.pixels.astype(np.float64)
    if mean_subtracted:
        template = template - template.mean()
    template_energy = float(np.sum(template ** 2))
    if template_energy <= 0.0:
        raise ZeroTemplateError("template has no energy" + (" after mean removal" if mean_subtracted else ""))

    th, tw = template.shape
    numerator = fftconvolve(image, template[::-1, ::-1], mode="valid")
    energy = _window_sums(image ** 2, th, tw)
    if mean_subtracted:
        energy = energy - _window_sums(image, th, tw) ** 2 / template.size
    energy = np.clip(energy, 0.0, None)

    scale = float(energy.max())
    empty = energy <= _ZERO_ENERGY * scale if scale > 0 else np.ones_like(energy, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = numerator / np.sqrt(energy * template_energy)
    scores[empty] = 0.0
    return CorrelationSurface(np.clip(scores, -1.0, 1.0), origin_offset=(0, 0), circular=False)


def global_fourier_match(img: Image, tmpl: Image) -> CorrelationSurface:
    """
    Template match with whole-image normalization in the Fourier domain

    The image is zero-meaned and scaled to unit norm as a whole, the
    template likewise, and the zero-padded template is circularly
    correlated with the image. Unlike `spatial_ncc`, bright regions that
    only partially resemble the template can outscore a true match.
    """
    if tmpl.width > img.width or tmpl.height > img.height:
        raise TemplateSizeError(f"template {tmpl.width}x{tmpl.height} larger than image "
                                f"{img.width}x{img.height}")

    image = img.pixels - img.pixels.mean()
    template = tmpl.pixels - tmpl.pixels.mean()
    t_norm = float(np.linalg.norm(template))
    if t_norm == 0.0:
        raise ZeroTemplateError("template is constant")
    i_norm = float(np.linalg.norm(image))
    if i_norm > 0:
        image = image / i_norm
    padded = np.zeros(image.shape)
    padded[:template.shape[0], :template.shape[1]] = template / t_norm

    surface = np.real(np.fft.ifft2(np.fft.fft2(image) * np.conj(np.fft.fft2(padded))))
    return CorrelationSurface(surface, origin_offset=(0, 0), circular=True)


def find_peak(surface: CorrelationSurface) -> Tuple[int, int, float]:
    """Global maximum as (x, y, value); ties go to the first in row-major order"""
    index = int(np.argmax(surface.values))
    y, x = divmod(index, surface.width)
    return x, y, float(surface.values[y, x])


def psr(surface: CorrelationSurface, window: int = PSR_WINDOW) -> PsrScore:
    """
    Peak-to-sidelobe ratio

    The sidelobe is the whole surface minus a window x window block centred
    on the global peak, clipped at the borders. Sigma is the population
    standard deviation.
    """
    values = surface.values
    if values.size <= window * window:
        raise DegenerateSurfaceError(f"surface of {values.size} values is too small for PSR")

    x, y, peak = find_peak(surface)
    half = window // 2
    mask = np.ones(values.shape, dtype=bool)
    mask[max(0, y - half):y + half + 1, max(0, x - half):x + half + 1] = False
    sidelobe = values[mask]

    mean = float(sidelobe.mean())
    sigma = float(sidelobe.std())
    scale = float(np.abs(values).max())
    if scale == 0.0 or sigma <= 1e-12 * scale:
        raise DegenerateSurfaceError("sidelobe has zero variance")
    return PsrScore(peak, (x, y), mean, sigma, (peak - mean) / sigma)


def exclude_border(surface: CorrelationSurface, bx: int, by: int) -> CorrelationSurface:
    """Crop bx columns and by rows from each side, keeping source coordinates"""
    if 2 * bx >= surface.width or 2 * by >= surface.height:
        raise DegenerateSurfaceError(f"border ({bx}, {by}) leaves nothing of a "
                                     f"{surface.width}x{surface.height} surface")
    interior = surface.values[by:surface.height - by, bx:surface.width - bx]
    dx, dy = surface.origin_offset
    return CorrelationSurface(interior, origin_offset=(dx + bx, dy + by), circular=False)
