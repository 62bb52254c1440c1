"""Train/evaluate cells and the lambda sweep.

A cell is one (lambda, seed) combination: train on the training split,
privatize the held-out split, then measure privacy (empirical MI, identity
misclassification rate, mean SSIM) and utility (proxy k-fold accuracy).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, provenance
from .data import DatasetKind, FergPairs, load_corpus, split_per_identity, stack_images
from .errors import DegenerateSampleError, SGAPError
from .metrics import (
    PrivacyReport,
    SampleSet,
    empirical_mi,
    fmt6,
    misclassification_rate_from_probs,
    pair_probabilities,
    privatize_images,
    project_pairs,
)
from .training import train
from .utility import UtilityReport, corpus_distortions, proxy_accuracy, utility_report

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("lambda", "seed", "mi_estimate", "misclassification_rate", "mean_ssim", "accuracy_mean",
                 "accuracy_std", "baseline_accuracy_mean", "n_pairs", "provenance")


def split_corpus(spec, corpus, holdout_fraction):
    """Training and held-out parts.

    Fingerprint corpora (two shots per identity) hold out whole identities;
    other corpora hold out the trailing images of every identity.
    """
    if spec.kind is DatasetKind.FINGERPRINT:
        ids = sorted({r.identity_id for r in corpus})
        n_hold = max(2, int(round(len(ids) * holdout_fraction)))
        held_ids = set(ids[len(ids) - n_hold:])
        return [r for r in corpus if r.identity_id not in held_ids], [r for r in corpus if r.identity_id in held_ids]
    counts = {}
    for r in corpus:
        counts[r.identity_id] = counts.get(r.identity_id, 0) + 1
    per_id = min(counts.values())
    n_hold = max(2, int(round(per_id * holdout_fraction)))
    return split_per_identity(corpus, per_id - n_hold)


def reference_pairs(held, seed):
    """(reference, original) arrays: each held-out image with another image of its identity."""
    rng = np.random.default_rng([seed, 3])
    by_id = {}
    for i, r in enumerate(held):
        by_id.setdefault(r.identity_id, []).append(i)
    refs = []
    for i, r in enumerate(held):
        others = [j for j in by_id[r.identity_id] if j != i]
        if not others:
            raise DegenerateSampleError(f"identity {r.identity_id} has a single held-out image")
        refs.append(others[int(rng.integers(len(others)))])
    images = stack_images(held)
    return images[np.array(refs)], images


def evaluate(params, held, cfg: ExperimentConfig, lam, seed, baseline=None):
    """Privacy and utility reports for a trained model on the held-out records."""
    sw = cfg.sweep
    gen, disc = params.build()
    eval_seed = sw.eval_seed
    originals = stack_images(held)
    privatized = privatize_images(gen, originals, eval_seed)

    refs, _ = reference_pairs(held, eval_seed)
    probs = pair_probabilities(disc, refs, privatized)
    mis = misclassification_rate_from_probs(probs, sw.threshold)

    # MI between (privatized X1, original X2) and the same/different label
    protocol = FergPairs(held, sw.eval_pairs, seed=eval_seed)
    pairs, labels = [], []
    for i in range(len(protocol)):
        a, b, label = protocol.pair_indices(i, epoch=0)
        pairs.append((privatized[a], originals[b]))
        labels.append(label)
    points = project_pairs(pairs, sw.projection, seed=eval_seed)
    mi = empirical_mi(SampleSet(points, np.array(labels)))

    priv_records = [type(r)(p.transpose(1, 2, 0), r.identity_id, r.attribute_id, r.shot_tag, r.path)
                    for r, p in zip(held, privatized)]
    mean_ssim = float(1.0 - np.mean(corpus_distortions(held, priv_records)))
    privacy = PrivacyReport(lam=lam, mi_estimate=mi, misclassification_rate=mis, mean_ssim=mean_ssim,
                            n_pairs=len(pairs), seed=seed)
    utility = utility_report(held, priv_records, cfg.utility, lam=lam, baseline=baseline)
    return privacy, utility


def csv_row(privacy: PrivacyReport, utility: UtilityReport, prov):
    return {
        "lambda": fmt6(privacy.lam),
        "seed": str(int(privacy.seed)),
        "mi_estimate": fmt6(privacy.mi_estimate),
        "misclassification_rate": fmt6(privacy.misclassification_rate),
        "mean_ssim": fmt6(privacy.mean_ssim),
        "accuracy_mean": fmt6(utility.accuracy_mean),
        "accuracy_std": fmt6(utility.accuracy_std),
        "baseline_accuracy_mean": fmt6(utility.baseline_accuracy_mean),
        "n_pairs": str(int(privacy.n_pairs)),
        "provenance": prov,
    }


def _nan_row(lam, seed, prov):
    row = {c: "nan" for c in SWEEP_COLUMNS}
    row.update({"lambda": fmt6(lam), "seed": str(seed), "n_pairs": "0", "provenance": prov})
    return row


def cell_dir(out, lam, seed):
    return Path(out) / "cells" / f"lam_{fmt6(lam)}_seed_{seed}"


def run_cell(cfg: ExperimentConfig, lam, seed, out, baseline=None):
    """Train + evaluate one cell, caching the result as ``result.json``.

    Returns the result dict; a cell whose cached result carries the same
    provenance is not retrained.
    """
    cell_cfg = cfg.with_cell(lam, seed)
    prov = provenance(cell_cfg.to_dict())
    cdir = cell_dir(out, lam, seed)
    result_path = cdir / "result.json"
    if result_path.exists():
        cached = json.loads(result_path.read_text())
        if cached.get("provenance") == prov and cached.get("status") == "ok":
            cached["cached"] = True
            return cached
    cdir.mkdir(parents=True, exist_ok=True)
    try:
        corpus = load_corpus(cell_cfg.dataset)
        train_part, held = split_corpus(cell_cfg.dataset, corpus, cfg.sweep.holdout_fraction)
        result = train(cell_cfg.dataset, cell_cfg.training, output_dir=cdir, corpus=train_part)
        privacy, utility = evaluate(result.params, held, cell_cfg, lam, seed, baseline=baseline)
        out_doc = {"status": "ok", "provenance": prov, "row": csv_row(privacy, utility, prov),
                   "checkpoint": str(result.checkpoint)}
    except SGAPError as exc:
        log.error("cell lambda=%s seed=%s failed: %s", lam, seed, exc)
        out_doc = {"status": f"failed: {type(exc).__name__}: {exc}", "provenance": prov,
                   "row": _nan_row(lam, seed, prov)}
    result_path.write_text(json.dumps(out_doc, indent=1, sort_keys=True))
    out_doc["cached"] = False
    return out_doc


def baseline_accuracy(cfg: ExperimentConfig):
    """Proxy accuracy of the unprivatized held-out split; shared by every cell."""
    corpus = load_corpus(cfg.dataset)
    _, held = split_corpus(cfg.dataset, corpus, cfg.sweep.holdout_fraction)
    return proxy_accuracy(held, cfg.utility).accuracy_mean


@dataclass
class SweepResult:
    rows: list
    statuses: list = field(default_factory=list)
    provenance: str = ""
    retrained: int = 0
    csv_path: Path | None = None
    plots: list = field(default_factory=list)


def _sorted_cells(lambdas, seeds):
    return sorted(((float(l), int(s)) for l in lambdas for s in seeds), key=lambda c: (-c[0], c[1]))


def _cell_worker(args):
    cfg_doc, lam, seed, out, baseline = args
    from .config import parse_config

    return run_cell(parse_config(cfg_doc), lam, seed, out, baseline)


def run_sweep(cfg: ExperimentConfig, out=None, plot=True):
    """Every (lambda, seed) cell, resumable; writes ``sweep.csv`` and two plots."""
    out = Path(out) if out is not None else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cells = _sorted_cells(cfg.sweep.lambdas, cfg.sweep.seeds)
    base_path = out / "baseline.json"
    prov_all = provenance(cfg.to_dict())
    baseline = None
    if base_path.exists():
        doc = json.loads(base_path.read_text())
        if doc.get("provenance") == prov_all:
            baseline = doc["baseline_accuracy_mean"]
    if baseline is None:
        baseline = baseline_accuracy(cfg)
        base_path.write_text(json.dumps({"provenance": prov_all, "baseline_accuracy_mean": baseline}))

    if cfg.sweep.workers > 1:
        doc = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=cfg.sweep.workers) as pool:
            results = list(pool.map(_cell_worker, [(doc, l, s, str(out), baseline) for l, s in cells]))
    else:
        results = [run_cell(cfg, l, s, out, baseline) for l, s in cells]

    rows = [r["row"] for r in results]
    csv_path = out / "sweep.csv"
    write_sweep_csv(rows, csv_path)
    plots = []
    if plot:
        from .reporting import plot_sweep

        plots = plot_sweep(csv_path, out, privacy_metric=cfg.sweep.privacy_metric)
    return SweepResult(rows=rows, statuses=[r["status"] for r in results], provenance=prov_all,
                       retrained=sum(not r.get("cached") for r in results), csv_path=csv_path, plots=plots)


def write_sweep_csv(rows, path):
    """Single writer; rows sorted by lambda descending then seed."""
    rows = sorted(rows, key=lambda r: (-float(r["lambda"]), int(r["seed"])))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in SWEEP_COLUMNS})
    return path


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise SGAPError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def aggregate(rows, column):
    """Per-lambda (mean, std) of a numeric column, lambdas descending; nan cells skipped."""
    by_lam = {}
    for r in rows:
        v = float(r[column])
        if math.isfinite(v):
            by_lam.setdefault(float(r["lambda"]), []).append(v)
    return [(lam, float(np.mean(v)), float(np.std(v))) for lam, v in sorted(by_lam.items(), reverse=True)]


__all__ = [
    "SWEEP_COLUMNS", "SweepResult", "aggregate", "baseline_accuracy", "csv_row", "evaluate", "read_sweep_csv",
    "reference_pairs", "run_cell", "run_sweep", "split_corpus", "write_sweep_csv",
]
