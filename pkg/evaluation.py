"""
Evaluation harness

Overlap and localization metrics plus the experiment drivers: matched-scale
baseline table, scale sweep, cumulative accuracy versus number of filters,
random-placement baseline, the repeated-setting experiment and the filter
selection study. Accuracies are always hits / total computed from integer
counts.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from detector import Backend, detect, max_psr_select
from errors import DegenerateInputError, DegenerateSurfaceError, EmptyTestSetError
from imagecore import AnnotatedSample, EyeAnnotation, FaceRect, PoseBin, resample_sample
from matching import DEFAULT_MAX_DIM, find_peak, freq_correlate, psr
from mosse import BankGrid, FilterBank, MosseFilter, build_bank

logger = logging.getLogger(__name__)

CONVENTION_NOTE = ("frequency-psr rects are centred on the correlation peak (top-left = peak - template/2); "
                   "spatial-ncc peaks are template top-left corners; localization is scored against "
                   "the eye midpoint")

REPEATED_SETTING_IODS = (16.0, 24.0)


class OverlapMode(Enum):
    IOU = "iou"
    INTERSECTION_OVER_TRUTH = "iot"


class LocalizationRule(Enum):
    WITHIN_5PX = "within-5px"
    WITHIN_10PCT_IOD = "within-10pct-iod"


@dataclass(frozen=True)
class OverlapCriterion:
    """Overlap measure and the threshold a detection must reach"""

    mode: OverlapMode = OverlapMode.IOU
    threshold: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "mode", OverlapMode(self.mode))
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"overlap threshold must be in (0, 1], got {self.threshold}")

    def passes(self, detected: FaceRect, truth: FaceRect) -> bool:
        return rect_overlap(detected, truth, self) >= self.threshold

    def to_dict(self) -> Dict:
        return {"mode": self.mode.value, "threshold": self.threshold}


def _overlap(intersection, detected_area, truth_area, mode: OverlapMode):
    # Shared by rect_overlap and the exhaustive placement count so both agree bit for bit
    if mode is OverlapMode.IOU:
        return intersection / (detected_area + truth_area - intersection)
    return intersection / truth_area


def rect_overlap(a: FaceRect, b: FaceRect, criterion: OverlapCriterion = OverlapCriterion()) -> float:
    """IOU, or intersection over the area of b (the truth)"""
    return float(_overlap(a.intersection_area(b), a.area, b.area, criterion.mode))


def localization_hit(peak: Tuple[float, float], ann: EyeAnnotation,
                     rule: LocalizationRule = LocalizationRule.WITHIN_5PX) -> bool:
    """Peak within 5 px (Euclidean, inclusive) or within 10% of the IOD on both axes of the eye midpoint"""
    rule = LocalizationRule(rule)
    dx = peak[0] - ann.center[0]
    dy = peak[1] - ann.center[1]
    if rule is LocalizationRule.WITHIN_5PX:
        return math.hypot(dx, dy) <= 5.0
    limit = 0.1 * ann.interocular
    return abs(dx) <= limit and abs(dy) <= limit


def accuracy_of(hits: int, total: int) -> float:
    if total <= 0:
        raise EmptyTestSetError("accuracy over an empty test set")
    return hits / total


@dataclass
class ExperimentReport:
    """Per-image records, aggregate accuracy, optional curve and the config echo"""

    name: str
    records: List[Dict[str, Any]] = field(default_factory=list)
    hits: int = 0
    total: int = 0
    curve: Optional[pd.DataFrame] = None
    config: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def accuracy(self) -> Optional[float]:
        return accuracy_of(self.hits, self.total) if self.total else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "experiment": self.name,
            "convention": CONVENTION_NOTE,
            "accuracy": self.accuracy,
            "hits": self.hits,
            "total": self.total,
            "seed": self.seed,
            "config": self.config,
            **self.extras,
            "curve": self.curve.to_dict(orient="records") if self.curve is not None else None,
            "records": self.records,
        }

    def write(self, out_dir, name: Optional[str] = None) -> List[Path]:
        """Write <name>.json and, when a curve is present, <name>.csv"""
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        stem = name or self.name
        paths = [root / f"{stem}.json"]
        with open(paths[0], "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        if self.curve is not None:
            paths.append(root / f"{stem}.csv")
            self.curve.to_csv(paths[1], index=False, encoding="utf-8", lineterminator="\n")
        logger.info(f"💾 Report written: {', '.join(str(p) for p in paths)}")
        return paths


def _parallel_map(fn: Callable, items: Sequence, workers: int, progress: bool, desc: str) -> List:
    """Ordered map over items, threaded when workers > 1"""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, disable=not progress))
    return [fn(item) for item in tqdm(items, desc=desc, disable=not progress)]


# ---------------------------------------------------------------------------
# Single-filter localization

def locate(filt: MosseFilter, sample: AnnotatedSample, max_dim: int = DEFAULT_MAX_DIM) -> Tuple[int, int]:
    """Peak of a filter's response on a sample, in source coordinates"""
    surface = freq_correlate(sample.image, filt, max_dim)
    x, y, _ = find_peak(surface)
    return surface.to_source(x, y)


def localization_accuracy(filt: MosseFilter,
                          samples: Sequence[AnnotatedSample],
                          rule: LocalizationRule = LocalizationRule.WITHIN_5PX,
                          max_dim: int = DEFAULT_MAX_DIM,
                          workers: int = 1) -> ExperimentReport:
    """Fraction of samples whose correlation peak lands on the eye midpoint"""
    if not samples:
        raise EmptyTestSetError("no samples to localize")
    rule = LocalizationRule(rule)

    def score(sample: AnnotatedSample) -> Dict[str, Any]:
        peak = locate(filt, sample, max_dim)
        return {"key": sample.key, "truth": list(sample.annotation.center), "peak": list(peak),
                "hit": localization_hit(peak, sample.annotation, rule)}

    records = _parallel_map(score, samples, workers, False, "Localizing")
    hits = sum(1 for r in records if r["hit"])
    return ExperimentReport("localization", records, hits, len(records),
                            extras={"rule": rule.value, "octave": filt.octave})


class TestSetProvider(Protocol):
    def samples(self, octave: float) -> List[AnnotatedSample]: ...


class ResampledTestSet:
    """Test images downscaled to a target octave; images that would need upsampling are skipped"""

    def __init__(self, samples: Sequence[AnnotatedSample]):
        self.source = list(samples)

    def samples(self, octave: float) -> List[AnnotatedSample]:
        target = 2.0 ** octave
        out = []
        for sample in self.source:
            factor = target / sample.annotation.interocular
            if factor > 1.0 + 1e-9:
                continue
            out.append(resample_sample(sample, min(factor, 1.0)))
        if not out:
            raise EmptyTestSetError(f"no test images reach octave {octave:.2f} without upsampling")
        return out


def sweep_octaves(center: float, span: float = 0.5, step: float = 0.05) -> List[float]:
    """Octaves center - span .. center + span in steps; 21 points for the defaults"""
    n = int(round(span / step))
    return [round(center + i * step, 10) for i in range(-n, n + 1)]


def baseline_table(filters: Sequence[MosseFilter],
                   provider: TestSetProvider,
                   rule: LocalizationRule = LocalizationRule.WITHIN_5PX,
                   max_dim: int = DEFAULT_MAX_DIM,
                   workers: int = 1,
                   progress: bool = False) -> ExperimentReport:
    """Matched-scale accuracy: each filter tested at its own octave"""
    rows, records, hits, total = [], [], 0, 0
    for filt in tqdm(filters, desc="Baseline", disable=not progress):
        report = localization_accuracy(filt, provider.samples(filt.octave), rule, max_dim, workers)
        rows.append({"octave": filt.octave, "pose": filt.pose_bin.value, "accuracy": report.accuracy})
        records.extend({**r, "octave": filt.octave} for r in report.records)
        hits += report.hits
        total += report.total
    return ExperimentReport("baseline", records, hits, total, curve=pd.DataFrame(rows),
                            extras={"rule": LocalizationRule(rule).value})


def scale_sweep(filt: MosseFilter,
                provider: TestSetProvider,
                rule: LocalizationRule = LocalizationRule.WITHIN_5PX,
                span: float = 0.5,
                step: float = 0.05,
                max_dim: int = DEFAULT_MAX_DIM,
                workers: int = 1,
                progress: bool = False) -> ExperimentReport:
    """
    Accuracy of one filter on test sets resampled across octave +/- span

    Returns:
        Report whose curve has one (octave, accuracy) row per step; the
        aggregate hits/total is the matched-octave point
    """
    rows, records = [], []
    matched = (0, 0)
    for octave in tqdm(sweep_octaves(filt.octave, span, step), desc="Scale sweep", disable=not progress):
        samples = provider.samples(octave)
        if not samples:
            raise EmptyTestSetError(f"empty test set at octave {octave:.2f}")
        report = localization_accuracy(filt, samples, rule, max_dim, workers)
        rows.append({"octave": octave, "accuracy": report.accuracy})
        records.extend({**r, "octave": octave} for r in report.records)
        if abs(octave - filt.octave) < 1e-9:
            matched = (report.hits, report.total)
    return ExperimentReport("scale-sweep", records, matched[0], matched[1], curve=pd.DataFrame(rows),
                            extras={"rule": LocalizationRule(rule).value, "filter_octave": filt.octave,
                                    "span": span, "step": step})


# ---------------------------------------------------------------------------
# Bank-level experiments

def _first_hit(rects: Sequence[Optional[FaceRect]], truth: FaceRect, criterion: OverlapCriterion) -> Optional[int]:
    """1-based rank of the first rect passing the criterion"""
    for rank, rect in enumerate(rects, start=1):
        if rect is not None and criterion.passes(rect, truth):
            return rank
    return None


def _curve_from_ranks(ranks: Sequence[Optional[int]], size: int) -> pd.DataFrame:
    total = len(ranks)
    counts = np.zeros(size + 1, dtype=np.int64)
    for rank in ranks:
        if rank is not None:
            counts[rank] += 1
    cumulative = np.cumsum(counts)[1:]
    return pd.DataFrame({"k": np.arange(1, size + 1), "accuracy": [int(c) / total for c in cumulative]})


def cumulative_curve(samples: Sequence[AnnotatedSample],
                     bank: FilterBank,
                     backend: Union[Backend, str] = Backend.FREQUENCY_PSR,
                     criterion: OverlapCriterion = OverlapCriterion(),
                     workers: int = 1,
                     progress: bool = False,
                     max_dim: int = DEFAULT_MAX_DIM) -> ExperimentReport:
    """
    accuracy[k] = fraction of images where any of the top-k detections passes the criterion

    The aggregate hits/total is the rank-1 accuracy.
    """
    if not samples:
        raise EmptyTestSetError("no test images")
    backend = Backend.from_name(backend)

    def score(sample: AnnotatedSample) -> Dict[str, Any]:
        result = detect(sample.image, bank, backend, k=len(bank), max_dim=max_dim)
        truth = sample.rect(bank.grid.crop)
        rank = _first_hit([d.rect for d in result], truth, criterion)
        top = result[0] if result.ok else None
        return {"key": sample.key, "truth": truth.to_dict(), "status": result.status.value,
                "detection": top.to_dict() if top else None,
                "overlap": rect_overlap(top.rect, truth, criterion) if top else 0.0,
                "first_hit_rank": rank, "hit": rank == 1}

    records = _parallel_map(score, samples, workers, progress, "Cumulative")
    curve = _curve_from_ranks([r["first_hit_rank"] for r in records], len(bank))
    hits = sum(1 for r in records if r["hit"])
    return ExperimentReport("cumulative", records, hits, len(records), curve=curve,
                            extras={"backend": backend.value, "overlap": criterion.to_dict()})


def random_baseline(samples: Sequence[AnnotatedSample],
                    bank: FilterBank,
                    seed: int = 0,
                    criterion: OverlapCriterion = OverlapCriterion()) -> ExperimentReport:
    """
    Random-placement baseline: per image, the bank's templates in random order,
    each at a uniformly random valid top-left
    """
    if not samples:
        raise EmptyTestSetError("no test images")
    rng = np.random.default_rng(seed)
    sizes = [(t.width, t.height) for t in bank.templates]

    ranks, records = [], []
    for sample in samples:
        width, height = sample.image.width, sample.image.height
        truth = sample.rect(bank.grid.crop)
        rects: List[Optional[FaceRect]] = []
        for index in rng.permutation(len(sizes)):
            w, h = sizes[index]
            if w > width or h > height:
                rects.append(None)
                continue
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            rects.append(FaceRect(x, y, w, h))
        rank = _first_hit(rects, truth, criterion)
        ranks.append(rank)
        records.append({"key": sample.key, "first_hit_rank": rank, "hit": rank == 1})

    hits = sum(1 for r in ranks if r == 1)
    return ExperimentReport("random-baseline", records, hits, len(samples),
                            curve=_curve_from_ranks(ranks, len(sizes)), seed=seed,
                            extras={"overlap": criterion.to_dict()})


def placement_probability(bank: FilterBank, sample: AnnotatedSample,
                          criterion: OverlapCriterion = OverlapCriterion()) -> float:
    """Exact chance that a random filter at a uniformly random valid top-left hits the truth"""
    width, height = sample.image.width, sample.image.height
    truth = sample.rect(bank.grid.crop)
    probabilities = []
    for template in bank.templates:
        w, h = template.width, template.height
        if w > width or h > height:
            probabilities.append(0.0)
            continue
        xs = np.arange(width - w + 1)
        ys = np.arange(height - h + 1)
        ix = np.clip(np.minimum(xs + w, truth.x + truth.w) - np.maximum(xs, truth.x), 0, None)
        iy = np.clip(np.minimum(ys + h, truth.y + truth.h) - np.maximum(ys, truth.y), 0, None)
        intersection = iy[:, None] * ix[None, :]
        overlap = _overlap(intersection, w * h, truth.area, criterion.mode)
        probabilities.append(int(np.count_nonzero(overlap >= criterion.threshold)) / overlap.size)
    return float(np.mean(probabilities))


def repeated_setting(train: Sequence[AnnotatedSample],
                     test: Sequence[AnnotatedSample],
                     backend: Union[Backend, str] = Backend.SPATIAL_NCC,
                     criterion: OverlapCriterion = OverlapCriterion(),
                     iods: Sequence[float] = REPEATED_SETTING_IODS,
                     sigma: float = 2.0,
                     epsilon: Optional[float] = None,
                     epsilon_scale: float = 0.01,
                     seed: int = 0,
                     workers: int = 1,
                     progress: bool = False,
                     bank: Optional[FilterBank] = None) -> ExperimentReport:
    """
    Location-specific experiment: a two-filter frontal bank trained on the
    training split, scored on the disjoint test split against a seeded
    random-placement baseline
    """
    if bank is None:
        grid = BankGrid(octaves=tuple(math.log2(i) for i in iods), poses=(PoseBin.FRONTAL,))
        frontal = [s for s in train if s.pose_bin is PoseBin.FRONTAL]
        bank = build_bank(frontal, grid, sigma, epsilon, epsilon_scale, workers, progress)

    detector_report = cumulative_curve(test, bank, backend, criterion, workers, progress)
    baseline = random_baseline(test, bank, seed, criterion)
    logger.info(f"📊 Repeated setting: detector {detector_report.accuracy:.3f}, "
                f"random baseline {baseline.accuracy:.3f}")

    return ExperimentReport(
        "repeated-setting", detector_report.records, detector_report.hits, detector_report.total,
        curve=detector_report.curve.assign(random_accuracy=baseline.curve["accuracy"]),
        seed=seed,
        extras={"backend": Backend.from_name(backend).value, "overlap": criterion.to_dict(),
                "bank_octaves": [f.octave for f in bank.filters],
                "random_accuracy": baseline.accuracy,
                "random_hits": baseline.hits},
    )


def filter_selection(bank: FilterBank,
                     samples: Sequence[AnnotatedSample],
                     rule: LocalizationRule = LocalizationRule.WITHIN_5PX,
                     max_dim: int = DEFAULT_MAX_DIM,
                     workers: int = 1,
                     progress: bool = False) -> ExperimentReport:
    """
    Localization accuracy of every bank filter on unresized images, plus the
    row obtained by picking, per image, the filter with the highest PSR
    """
    if not samples:
        raise EmptyTestSetError("no test images")
    rule = LocalizationRule(rule)

    def score(sample: AnnotatedSample) -> Dict[str, Any]:
        peaks: List[Optional[Tuple[int, int]]] = []
        scores = []
        for filt in bank.filters:
            try:
                surface = freq_correlate(sample.image, filt, max_dim)
                response = psr(surface)
            except (DegenerateInputError, DegenerateSurfaceError) as e:
                logger.debug(f"Filter {filt.filter_id} gave no response on {sample.key}: {e}")
                peaks.append(None)
                continue
            x, y, _ = find_peak(surface)
            peaks.append(surface.to_source(x, y))
            scores.append((filt.filter_id, response))
        hits = [p is not None and localization_hit(p, sample.annotation, rule) for p in peaks]
        if not scores:
            logger.warning(f"⚠️ No filter responded on {sample.key}; counted as a miss")
            return {"key": sample.key, "filter_hits": hits, "selected": None, "hit": False}
        winner = max_psr_select(scores)
        chosen = next(i for i, f in enumerate(bank.filters) if f.filter_id == winner)
        return {"key": sample.key,
                "filter_hits": hits,
                "selected": {"octave": winner[0], "pose": winner[1].value},
                "hit": hits[chosen]}

    records = _parallel_map(score, samples, workers, progress, "Filter selection")
    total = len(records)
    rows = []
    for index, filt in enumerate(bank.filters):
        filter_hits = sum(1 for r in records if r["filter_hits"][index])
        rows.append({"filter": f"{filt.octave:g}/{filt.pose_bin.value}", "accuracy": filter_hits / total})
    hits = sum(1 for r in records if r["hit"])
    rows.append({"filter": "max-psr", "accuracy": hits / total})
    return ExperimentReport("filter-selection", records, hits, total, curve=pd.DataFrame(rows),
                            extras={"rule": rule.value})
