"""
Face detection with a filter bank

Every filter of a bank is applied to the image through one of two back
ends, each filter's best response is recorded, and the responses are
ranked into detections.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

from errors import (
    DegenerateInputError,
    DegenerateSurfaceError,
    DimensionMismatchError,
    TemplateSizeError,
    ZeroTemplateError,
)
from imagecore import FaceRect, Image, PoseBin
from matching import (
    DEFAULT_MAX_DIM,
    PsrScore,
    exclude_border,
    find_peak,
    freq_correlate,
    psr,
    spatial_ncc,
)
from mosse import FilterBank, FilterId, MosseFilter

logger = logging.getLogger(__name__)

__all__ = [
    "Backend",
    "Detection",
    "DetectionResult",
    "DetectionStatus",
    "FaceRect",
    "FilterResponse",
    "detect",
    "max_psr_select",
]

# Per-filter failures that mean "no usable response" rather than a caller error
_DEGENERATE = (DegenerateSurfaceError, DegenerateInputError, TemplateSizeError,
               ZeroTemplateError, DimensionMismatchError)


class Backend(Enum):
    """Correlation back end; values are the command-line names"""

    FREQUENCY_PSR = "frequency-psr"
    SPATIAL_NCC = "spatial-ncc"

    @classmethod
    def from_name(cls, name: Union[str, "Backend"]) -> "Backend":
        if isinstance(name, Backend):
            return name
        return cls(str(name).lower().replace("_", "-"))


class DetectionStatus(Enum):
    OK = "OK"
    NO_RESPONSE = "NO_RESPONSE"


@dataclass(frozen=True)
class Detection:
    """One ranked face hypothesis"""

    rect: FaceRect
    score: float
    filter_id: FilterId
    backend: Backend
    peak: Tuple[int, int]

    def to_dict(self) -> Dict:
        octave, pose = self.filter_id
        return {
            "rect": self.rect.to_dict(),
            "score": self.score,
            "filter_id": {"octave": octave, "pose": pose.value},
            "backend": self.backend.value,
            "peak": list(self.peak),
        }


@dataclass(frozen=True)
class FilterResponse:
    """Best response of one filter; detection is None when the filter was degenerate"""

    filter_id: FilterId
    detection: Optional[Detection]
    psr: Optional[PsrScore] = None


@dataclass(frozen=True)
class DetectionResult:
    """Ranked detections plus every filter's response; behaves as a sequence of detections"""

    status: DetectionStatus
    detections: Tuple[Detection, ...] = ()
    responses: Tuple[FilterResponse, ...] = field(default=(), repr=False)

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def __getitem__(self, index):
        return self.detections[index]

    @property
    def ok(self) -> bool:
        return self.status is DetectionStatus.OK

    def to_dict(self) -> Dict:
        return {"status": self.status.value, "detections": [d.to_dict() for d in self.detections]}


def _rank_key(detection: Detection):
    octave, pose = detection.filter_id
    return (-detection.score, octave, pose.order)


def _apply_frequency(img: Image, filt: MosseFilter, tmpl: Image, max_dim: int) -> FilterResponse:
    surface = freq_correlate(img, filt, max_dim)
    # Wrapped responses within half a template of the border are unreliable
    interior = exclude_border(surface, tmpl.width // 2, tmpl.height // 2)
    score = psr(interior)
    center = interior.to_source(*score.peak_xy)
    rect = FaceRect(center[0] - tmpl.width // 2, center[1] - tmpl.height // 2, tmpl.width, tmpl.height)
    detection = Detection(rect.fit_to(img.width, img.height), score.psr, filt.filter_id,
                          Backend.FREQUENCY_PSR, center)
    return FilterResponse(filt.filter_id, detection, score)


def _apply_ncc(img: Image, filt: MosseFilter, tmpl: Image) -> FilterResponse:
    surface = spatial_ncc(img, tmpl)
    x, y, value = find_peak(surface)
    top_left = surface.to_source(x, y)
    rect = FaceRect(top_left[0], top_left[1], tmpl.width, tmpl.height)
    detection = Detection(rect, value, filt.filter_id, Backend.SPATIAL_NCC, top_left)
    return FilterResponse(filt.filter_id, detection)


def apply_filter(img: Image, filt: MosseFilter, tmpl: Image,
                 backend: Backend = Backend.FREQUENCY_PSR,
                 max_dim: int = DEFAULT_MAX_DIM) -> FilterResponse:
    """Best response of a single bank filter; degenerate filters yield no detection"""
    try:
        if backend is Backend.FREQUENCY_PSR:
            return _apply_frequency(img, filt, tmpl, max_dim)
        return _apply_ncc(img, filt, tmpl)
    except _DEGENERATE as e:
        logger.debug(f"Filter {filt.filter_id} gave no response: {e}")
        return FilterResponse(filt.filter_id, None)


def detect(img: Image,
           bank: FilterBank,
           backend: Union[Backend, str] = Backend.FREQUENCY_PSR,
           k: int = 1,
           workers: int = 1,
           max_dim: int = DEFAULT_MAX_DIM) -> DetectionResult:
    """
    Apply every bank filter and return the top-k detections

    FREQUENCY_PSR ranks by PSR with the peak taken as the face centre;
    SPATIAL_NCC ranks by the raw NCC peak of the filter's template, whose
    peak is the template's top-left. Ties go to the lower octave, then pose
    order LEFT < FRONTAL < RIGHT.

    Args:
        img: Image to search
        bank: Non-empty filter bank
        backend: Correlation back end
        k: Number of detections to return
        workers: Threads applying filters
        max_dim: Largest accepted correlation dimension

    Returns:
        DetectionResult; status NO_RESPONSE when every filter was degenerate
    """
    if len(bank) == 0:
        raise DegenerateInputError("cannot detect with an empty bank")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    backend = Backend.from_name(backend)

    def run(pair) -> FilterResponse:
        filt, tmpl = pair
        return apply_filter(img, filt, tmpl, backend, max_dim)

    pairs = list(bank)
    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(pairs))) as pool:
            responses = list(pool.map(run, pairs))
    else:
        responses = [run(pair) for pair in pairs]

    ranked = sorted((r.detection for r in responses if r.detection is not None), key=_rank_key)
    if not ranked:
        logger.warning(f"No filter responded on {img!r}")
        return DetectionResult(DetectionStatus.NO_RESPONSE, (), tuple(responses))
    return DetectionResult(DetectionStatus.OK, tuple(ranked[:k]), tuple(responses))


def max_psr_select(responses: Union[Iterable[Tuple[FilterId, Union[PsrScore, float]]],
                                    Dict[FilterId, Union[PsrScore, float]]]) -> FilterId:
    """
    Winning filter by PSR; ties go to the lower octave, then pose order

    Args:
        responses: (filter_id, score) pairs or a mapping; scores may be
            PsrScore instances or bare PSR values

    Returns:
        The winning filter id
    """
    items: Sequence = list(responses.items()) if isinstance(responses, dict) else list(responses)
    if not items:
        raise ValueError("max_psr_select needs at least one response")

    def key(item):
        (octave, pose), score = item
        value = score.psr if isinstance(score, PsrScore) else float(score)
        return (-value, octave, PoseBin(pose).order)

    return min(items, key=key)[0]

