#!/usr/bin/env python3
"""
CorrFaD command pipeline

The four commands (synth, train, detect, eval) as library calls on a
resolved RunConfig. The command-line entry point in corrfad.py only builds
the RunConfig and calls these.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from detector import Backend, detect
from errors import ConfigConflictError, CorrFaDError, EmptyTestSetError, HashMismatchError
from evaluation import (
    LocalizationRule,
    OverlapCriterion,
    OverlapMode,
    ResampledTestSet,
    baseline_table,
    cumulative_curve,
    filter_selection,
    random_baseline,
    repeated_setting,
    scale_sweep,
)
from imagecore import AnnotatedSample, PoseBin, load_annotations
from mosse import BankGrid, FilterBank, build_bank, load_bank, save_bank
from settings import RunConfig, get_settings
from synth import CorpusSpec, SyntheticTestSet, generate_corpus, load_corpus, read_manifest

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Inputs

def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def load_samples(config: RunConfig, split: str) -> Tuple[List[AnnotatedSample], Optional[str]]:
    """
    Samples named by a config: a corpus directory split, or an annotation CSV

    Returns:
        (samples, corpus hash); the hash is the corpus manifest's, or the
        CSV's own hash for bare annotation files
    """
    if config.get("annotations"):
        csv_path = Path(config["annotations"])
        samples = load_annotations(csv_path)
        return samples, _file_hash(csv_path)
    if config.get("corpus"):
        manifest = read_manifest(config["corpus"])
        return load_corpus(config["corpus"], split), manifest.get("corpus_hash")
    raise ConfigConflictError(f"{config.command} needs --corpus or --annotations")


def check_hashes(bank: FilterBank, corpus_hash: Optional[str], force: bool) -> None:
    """Refuse a bank trained on a different corpus unless forced"""
    if bank.corpus_hash is None or corpus_hash is None or bank.corpus_hash == corpus_hash:
        return
    message = f"bank was trained on corpus {bank.corpus_hash}, inputs are corpus {corpus_hash}"
    if not force:
        raise HashMismatchError(message + " (pass --force to override)")
    logger.warning(f"⚠️ {message}; continuing because of --force")


def corpus_spec_from_dict(data: Dict[str, Any]) -> CorpusSpec:
    fields = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return CorpusSpec(**fields)


def corpus_spec_from_config(config: RunConfig) -> CorpusSpec:
    return CorpusSpec(
        canvas=tuple(int(v) for v in config["canvas"]),
        background=config["background"],
        clutter=int(config["clutter"]),
        iod_range=(float(config["iod_min"]), float(config["iod_max"])),
        octaves=tuple(float(o) for o in config["octaves"]) if config.get("octaves") else None,
        poses=tuple(float(p) for p in config["poses"]) if config.get("poses") else None,
        pose_range=(float(config["pose_min"]), float(config["pose_max"])),
        noise=float(config["noise"]),
        train_identities=int(config["train_identities"]),
        test_identities=int(config["test_identities"]),
    )


def grid_from_config(config: RunConfig) -> BankGrid:
    crop = tuple(float(c) for c in config.get("crop") or (1.0, 1.25))
    poses = tuple(PoseBin(str(p).upper()) for p in config.get("poses") or ("LEFT", "FRONTAL", "RIGHT"))
    if config.get("octaves"):
        return BankGrid(octaves=tuple(float(o) for o in config["octaves"]), poses=poses, crop=crop)
    if config.get("grid", "default") != "default":
        raise ConfigConflictError(f"unknown grid {config['grid']!r}; use 'default' or list octaves")
    return BankGrid(octaves=BankGrid.default().octaves, poses=poses, crop=crop)


def criterion_from_config(config: RunConfig) -> OverlapCriterion:
    settings = get_settings()
    return OverlapCriterion(OverlapMode(config.get("overlap_mode") or settings.overlap_mode),
                            float(config.get("overlap_threshold") or settings.overlap_threshold))


def _write_json(data: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Commands

def run_synth(config: RunConfig) -> Dict[str, Any]:
    """Generate a corpus on disk"""
    logger.info(f"🚀 Generating corpus into {config['out']}")
    corpus = generate_corpus(
        corpus_spec_from_config(config),
        n_train=int(config["n_train"]),
        n_test=int(config["n_test"]),
        seed=int(config["seed"]),
        out_dir=config["out"],
        workers=int(config["workers"]),
        progress=bool(config["progress"]),
        config_hash=config.config_hash(),
    )
    return {"success": True, "out": str(config["out"]), "corpus_hash": corpus.corpus_hash,
            "n_train": len(corpus.train), "n_test": len(corpus.test)}


def run_train(config: RunConfig) -> Dict[str, Any]:
    """Train a bank over the configured grid and write it as CFAD"""
    samples, corpus_hash = load_samples(config, "train")
    grid = grid_from_config(config)
    logger.info(f"🚀 Training {len(grid.cells())} filters from {len(samples)} samples")
    bank = build_bank(samples, grid,
                      sigma=float(config["sigma"]),
                      epsilon=config.get("epsilon"),
                      epsilon_scale=float(config["epsilon_scale"]),
                      workers=int(config["workers"]),
                      progress=bool(config["progress"]),
                      config_hash=config.config_hash(),
                      corpus_hash=corpus_hash)
    path = save_bank(bank, config["out"])
    return {"success": True, "bank": str(path), "filters": len(bank),
            "config_hash": bank.config_hash, "corpus_hash": corpus_hash}


def run_detect(config: RunConfig) -> Dict[str, Any]:
    """Detect on every image of a split and write detections JSON"""
    if not config.get("bank"):
        raise ConfigConflictError("detect needs --bank")
    bank = load_bank(config["bank"])
    samples, corpus_hash = load_samples(config, config["split"])
    check_hashes(bank, corpus_hash, bool(config["force"]))

    backend = Backend.from_name(config["backend"])
    k = int(config["k"])
    logger.info(f"🚀 Detecting on {len(samples)} images with {len(bank)} filters ({backend.value})")
    images = []
    for sample in samples:
        result = detect(sample.image, bank, backend, k=k, workers=int(config["workers"]),
                        max_dim=int(config["max_dim"]))
        images.append({"key": sample.key, **result.to_dict()})

    output = {
        "config": config.echo(),
        "config_hash": config.config_hash(),
        "bank_config_hash": bank.config_hash,
        "corpus_hash": corpus_hash,
        "backend": backend.value,
        "k": k,
        "images": images,
    }
    path = _write_json(output, Path(config["out"]))
    logger.info(f"✅ Detections written to {path}")
    return {"success": True, "out": str(path), "images": len(images)}


def _test_provider(config: RunConfig, test: List[AnnotatedSample]):
    """Native-scale synthetic renders for generated corpora, downscaled test images otherwise"""
    if config.get("corpus") and not config.get("annotations"):
        manifest = read_manifest(config["corpus"])
        return SyntheticTestSet(corpus_spec_from_dict(manifest["spec"]), int(config["n_per_step"]),
                                int(config["seed"]))
    return ResampledTestSet(test)


def _sweep_filter(bank: FilterBank, octave: Optional[float]):
    frontal = [f for f in bank.filters if f.pose_bin is PoseBin.FRONTAL] or list(bank.filters)
    if octave is None:
        return frontal[0]
    return min(frontal, key=lambda f: (abs(f.octave - float(octave)), f.octave))


def run_eval(config: RunConfig) -> Dict[str, Any]:
    """Run one experiment and write its report"""
    experiment = config["experiment"]
    criterion = criterion_from_config(config)
    rule = LocalizationRule(config["rule"])
    workers = int(config["workers"])
    progress = bool(config["progress"])
    logger.info(f"🚀 Running experiment {experiment}")

    test, corpus_hash = load_samples(config, "test")
    if not test:
        raise EmptyTestSetError("test split is empty")
    bank = load_bank(config["bank"]) if config.get("bank") else None
    if bank is not None:
        check_hashes(bank, corpus_hash, bool(config["force"]))
    elif experiment != "repeated-setting":
        raise ConfigConflictError(f"experiment {experiment} needs --bank")

    if experiment == "repeated-setting":
        train, _ = load_samples(config, "train") if config.get("corpus") else ([], None)
        if bank is None and not train:
            raise ConfigConflictError("repeated-setting needs a corpus with a train split or --bank")
        iods = tuple(2.0 ** float(o) for o in config["octaves"]) if config.get("octaves") else (16.0, 24.0)
        report = repeated_setting(train, test,
                                  backend=config.get("backend") or Backend.SPATIAL_NCC,
                                  criterion=criterion, iods=iods,
                                  sigma=float(config["sigma"]), epsilon=config.get("epsilon"),
                                  epsilon_scale=float(config["epsilon_scale"]),
                                  seed=int(config["seed"]), workers=workers, progress=progress, bank=bank)
    elif experiment == "baseline":
        report = baseline_table(bank.filters, _test_provider(config, test), rule,
                                int(config["max_dim"]), workers, progress)
    elif experiment == "scale-sweep":
        report = scale_sweep(_sweep_filter(bank, config.get("octave")), _test_provider(config, test), rule,
                             float(config["octave_span"]), float(config["step"]),
                             int(config["max_dim"]), workers, progress)
    elif experiment == "cumulative":
        report = cumulative_curve(test, bank, config.get("backend") or Backend.FREQUENCY_PSR,
                                  criterion, workers, progress, int(config["max_dim"]))
    elif experiment == "random-baseline":
        report = random_baseline(test, bank, int(config["seed"]), criterion)
    else:
        report = filter_selection(bank, test, rule, int(config["max_dim"]), workers, progress)

    report.config = {**config.echo(), "config_hash": config.config_hash(), "corpus_hash": corpus_hash,
                     "bank_config_hash": bank.config_hash if bank else None}
    report.seed = int(config["seed"])
    paths = report.write(config["out_dir"], experiment)
    accuracy = report.accuracy
    logger.info(f"✅ {experiment}: accuracy {accuracy:.4f}" if accuracy is not None else f"✅ {experiment} done")
    return {"success": True, "experiment": experiment, "accuracy": accuracy,
            "outputs": [str(p) for p in paths]}


COMMANDS = {
    "synth": run_synth,
    "train": run_train,
    "detect": run_detect,
    "eval": run_eval,
}


def run_command(config: RunConfig) -> Dict[str, Any]:
    """Run one command; failures are logged here and re-raised for the caller's exit code"""
    try:
        return COMMANDS[config.command](config)
    except (CorrFaDError, FileNotFoundError) as e:
        logger.error(f"❌ {config.command} failed: {e}")
        raise
