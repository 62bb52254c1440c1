"""JSON experiment config: parsing and whole-document validation.

A config document has four sections::

    {"dataset": {...}, "training": {"lambda": 4.0, ...}, "utility": {...}, "sweep": {...}}

Validation collects every problem before raising, so one run of ``train``
reports all bad fields at once.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .data import DatasetKind, DatasetSpec
from .errors import ConfigurationError, ValidationError
from .networks import DiscriminatorConfig, GeneratorConfig
from .training import ALTERNATIONS, TrainingConfig
from .utility import ClassifierKind, UtilityConfig

OUTPUT_ROOT_ENV = "SGAP_OUTPUT_ROOT"
DEFAULT_LAMBDAS = (10.0, 8.0, 6.0, 4.0, 2.0, 1.0, 0.7)

# (json key, attribute name, type, required)
_DATASET = [
    ("kind", "kind", str, False), ("root_path", "root_path", (str, type(None)), False),
    ("image_size", "image_size", int, False), ("epoch_pair_count", "epoch_pair_count", int, False),
    ("seed", "seed", int, False), ("identities", "identities", int, False),
    ("images_per_identity", "images_per_identity", int, False), ("grayscale", "grayscale", bool, False),
    ("crop_bottom", "crop_bottom", int, False),
]
_TRAINING = [
    ("lambda", "lam", (int, float), True), ("delta", "delta", (int, float, type(None)), False),
    ("epochs", "epochs", int, False), ("batch_size", "batch_size", int, False),
    ("adam_beta1", "adam_beta1", (int, float), False), ("adam_beta2", "adam_beta2", (int, float), False),
    ("learning_rate_d", "learning_rate_d", (int, float), False),
    ("learning_rate_g", "learning_rate_g", (int, float), False),
    ("alternation", "alternation", str, False), ("d_steps", "d_steps", int, False),
    ("d_pretrain_epochs", "d_pretrain_epochs", int, False), ("checkpoint_every", "checkpoint_every", int, False),
    ("seed", "seed", int, False), ("generator", "generator", dict, False),
    ("discriminator", "discriminator", dict, False),
]
_UTILITY = [
    ("folds", "folds", int, False), ("classifier", "classifier", str, False), ("epochs", "epochs", int, False),
    ("seed", "seed", int, False), ("batch_size", "batch_size", int, False),
    ("learning_rate", "learning_rate", (int, float), False),
    ("pretrained_path", "pretrained_path", (str, type(None)), False),
]
_SWEEP = [
    ("lambdas", "lambdas", list, False), ("seeds", "seeds", list, False),
    ("output_dir", "output_dir", str, False), ("eval_pairs", "eval_pairs", int, False),
    ("holdout_fraction", "holdout_fraction", (int, float), False), ("projection", "projection", str, False),
    ("threshold", "threshold", (int, float), False), ("eval_seed", "eval_seed", int, False),
    ("privacy_metric", "privacy_metric", str, False), ("workers", "workers", int, False),
]


@dataclass
class SweepSettings:
    lambdas: list = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    eval_pairs: int = 1000
    holdout_fraction: float = 0.5
    projection: str = "PCA3"
    threshold: float = 0.5
    eval_seed: int = 0
    privacy_metric: str = "misclassification_rate"
    workers: int = 1

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    training: TrainingConfig
    utility: UtilityConfig
    sweep: SweepSettings

    def to_dict(self):
        return {
            "dataset": self.dataset.to_dict(),
            "training": training_to_json(self.training),
            "utility": self.utility.to_dict(),
            "sweep": self.sweep.to_dict(),
        }

    def output_dir(self):
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.sweep.output_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    def with_cell(self, lam, seed):
        """Copy with the training lambda/seed replaced."""
        doc = self.to_dict()
        doc["training"]["lambda"] = lam
        doc["training"]["seed"] = seed
        return parse_config(doc)


def training_to_json(cfg: TrainingConfig):
    d = cfg.to_dict()
    d["lambda"] = d.pop("lam")
    return d


def provenance(doc, version=__version__):
    """Short hash of the canonical config plus the package version."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return f"{hashlib.sha256(canon.encode()).hexdigest()[:12]}-v{version}"


def _collect(section, raw, schema, problems):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append((section, "must be a JSON object"))
        return {}
    known = {k for k, *_ in schema}
    for key in raw:
        if key not in known:
            problems.append((f"{section}.{key}", "unknown field"))
    out = {}
    for key, attr, typ, required in schema:
        if key not in raw:
            if required:
                problems.append((key, f"required field missing from {section}"))
            continue
        val = raw[key]
        # bool is an int subclass; keep them apart
        if isinstance(val, bool) and typ is not bool and bool not in (typ if isinstance(typ, tuple) else (typ,)):
            problems.append((key, f"{section}.{key} has the wrong type"))
            continue
        if not isinstance(val, typ):
            problems.append((key, f"{section}.{key} has the wrong type ({type(val).__name__})"))
            continue
        out[attr] = val
    return out


def _check_ranges(ds, tr, ut, sw, problems):
    if "kind" in ds and ds["kind"] not in DatasetKind.__members__:
        problems.append(("kind", f"dataset.kind must be one of {list(DatasetKind.__members__)}"))
    size = ds.get("image_size", 64)
    if size <= 0 or size % 32:
        problems.append(("image_size", "dataset.image_size must be a positive multiple of 32"))
    pairs = ds.get("epoch_pair_count", 320)
    if pairs <= 0 or pairs % 2:
        problems.append(("epoch_pair_count", "dataset.epoch_pair_count must be positive and even"))
    if ds.get("kind", "SYNTHETIC") != "SYNTHETIC" and not ds.get("root_path"):
        problems.append(("root_path", "dataset.root_path is required for on-disk corpora"))
    for key in ("identities", "images_per_identity"):
        if key in ds and ds[key] < 2:
            problems.append((key, f"dataset.{key} must be >= 2"))

    lam = tr.get("lam")
    if lam is not None and (not math.isfinite(lam) or lam < 0):
        problems.append(("lambda", "training.lambda must be a finite non-negative number"))
    if tr.get("epochs", 1) < 1:
        problems.append(("epochs", "training.epochs must be >= 1"))
    if tr.get("batch_size", 1) < 1:
        problems.append(("batch_size", "training.batch_size must be >= 1"))
    for key in ("adam_beta1", "adam_beta2"):
        if key in tr and not 0 < tr[key] < 1:
            problems.append((key, f"training.{key} must lie in (0, 1)"))
    for key in ("learning_rate_d", "learning_rate_g"):
        if key in tr and tr[key] <= 0:
            problems.append((key, f"training.{key} must be positive"))
    if "alternation" in tr and tr["alternation"] not in ALTERNATIONS:
        problems.append(("alternation", f"training.alternation must be one of {list(ALTERNATIONS)}"))
    for key, cls in (("generator", GeneratorConfig), ("discriminator", DiscriminatorConfig)):
        if key in tr:
            sub = dict(tr[key])
            sub.setdefault("input_size", size)
            try:
                tr[key] = cls(**sub)
            except (TypeError, ConfigurationError) as exc:
                problems.append((key, f"training.{key}: {exc}"))

    if ut.get("folds", 4) < 2:
        problems.append(("folds", "utility.folds must be >= 2"))
    if "classifier" in ut and ut["classifier"] not in ClassifierKind.__members__:
        problems.append(("classifier", f"utility.classifier must be one of {list(ClassifierKind.__members__)}"))
    if ut.get("classifier") == "PRETRAINED_FINETUNE" and not ut.get("pretrained_path"):
        problems.append(("pretrained_path", "utility.pretrained_path is required for PRETRAINED_FINETUNE"))

    if "lambdas" in sw:
        lams = sw["lambdas"]
        if not lams or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and x >= 0 for x in lams):
            problems.append(("lambdas", "sweep.lambdas must be a non-empty list of non-negative numbers"))
    if "seeds" in sw:
        seeds = sw["seeds"]
        if not seeds or not all(isinstance(x, int) and not isinstance(x, bool) for x in seeds):
            problems.append(("seeds", "sweep.seeds must be a non-empty list of integers"))
    if "holdout_fraction" in sw and not 0 < sw["holdout_fraction"] < 1:
        problems.append(("holdout_fraction", "sweep.holdout_fraction must lie in (0, 1)"))
    if "projection" in sw and sw["projection"].upper() not in ("PCA3", "TSNE3"):
        problems.append(("projection", "sweep.projection must be PCA3 or TSNE3"))
    if "privacy_metric" in sw and sw["privacy_metric"] not in ("mi_estimate", "misclassification_rate"):
        problems.append(("privacy_metric", "sweep.privacy_metric must be mi_estimate or misclassification_rate"))
    if sw.get("eval_pairs", 1000) < 10 or sw.get("eval_pairs", 1000) % 2:
        problems.append(("eval_pairs", "sweep.eval_pairs must be an even number >= 10"))
    if sw.get("workers", 1) < 1:
        problems.append(("workers", "sweep.workers must be >= 1"))


def parse_config(doc) -> ExperimentConfig:
    """Validate a config mapping; raises :class:`ValidationError` listing every bad field."""
    problems = []
    if not isinstance(doc, dict):
        raise ValidationError([("<root>", "config must be a JSON object")])
    for key in doc:
        if key not in ("dataset", "training", "utility", "sweep"):
            problems.append((key, "unknown section"))
    ds = _collect("dataset", doc.get("dataset"), _DATASET, problems)
    tr = _collect("training", doc.get("training"), _TRAINING, problems)
    ut = _collect("utility", doc.get("utility"), _UTILITY, problems)
    sw = _collect("sweep", doc.get("sweep"), _SWEEP, problems)
    _check_ranges(ds, tr, ut, sw, problems)
    if problems:
        raise ValidationError(problems)
    try:
        dataset = DatasetSpec(**ds)
        training = TrainingConfig(**tr)
        utility = UtilityConfig(**ut)
        sweep = SweepSettings(**sw)
    except ConfigurationError as exc:
        raise ValidationError([("<config>", str(exc))]) from exc
    return ExperimentConfig(dataset, training, utility, sweep)


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError([("<file>", f"{path} does not exist")]) from exc
    except json.JSONDecodeError as exc:
        raise ValidationError([("<file>", f"{path} is not valid JSON: {exc}")]) from exc
    return parse_config(doc)
