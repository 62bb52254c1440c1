"""Command-line entry point.

Exit codes: 0 success, 1 config validation failure, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from .archive import load_params
from .config import ExperimentConfig, load_config
from .data import DatasetKind, DatasetSpec, export_ferg_layout, load_corpus, synth_glyph_corpus, unit_to_bytes, \
    bytes_to_unit, write_png
from .errors import ConfigurationError, NonFiniteLossError, SGAPError, ValidationError
from .experiment import SWEEP_COLUMNS, csv_row, evaluate, run_sweep, split_corpus
from .metrics import ssim
from .training import train
from .utility import privatize_corpus

log = logging.getLogger("sgap")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _override_seed(cfg: ExperimentConfig, seed):
    if seed is None:
        return cfg
    cfg.training.seed = int(seed)
    cfg.sweep.seeds = [int(seed)]
    return cfg


def cmd_train(config_path, seed=None):
    """Train on the training split; returns the final checkpoint path."""
    cfg = _override_seed(load_config(config_path), seed)
    out = cfg.output_dir()
    corpus = load_corpus(cfg.dataset)
    train_part, _ = split_corpus(cfg.dataset, corpus, cfg.sweep.holdout_fraction)
    result = train(cfg.dataset, cfg.training, output_dir=out, corpus=train_part)
    return result.checkpoint


def _detect_layout(root):
    root = Path(root)
    if any(p.suffix.lower() == ".png" and p.name[:1].lower() in "fs" for p in root.iterdir() if p.is_file()):
        return DatasetKind.FINGERPRINT
    return DatasetKind.FERG_STYLE


def cmd_privatize(checkpoint, in_dir, out_dir, seed=0):
    """Write privatized copies mirroring the input layout plus ``manifest.csv``.

    ``in_dir`` may be the literal ``SYNTHETIC``: the synthetic corpus recorded
    in the checkpoint is first exported next to ``out_dir`` (``<out>_source``)
    and privatized from there.
    """
    params = load_params(checkpoint)
    gcfg = params.generator_config
    ds_doc = dict(params.extra_config.get("dataset", {}))
    out_dir = Path(out_dir)
    if str(in_dir) == "SYNTHETIC":
        spec = DatasetSpec(**{**ds_doc, "kind": "SYNTHETIC"}) if ds_doc else DatasetSpec(image_size=gcfg.input_size)
        source = out_dir.parent / (out_dir.name + "_source")
        export_ferg_layout(synth_glyph_corpus(spec.identities, spec.images_per_identity, gcfg.input_size, spec.seed),
                           source)
        in_dir = source
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise ConfigurationError(f"input directory {in_dir} does not exist")
    kind = _detect_layout(in_dir)
    spec = DatasetSpec(kind=kind, root_path=str(in_dir), image_size=gcfg.input_size,
                       grayscale=gcfg.input_channels == 1, crop_bottom=ds_doc.get("crop_bottom", 32),
                       epoch_pair_count=2)
    corpus = load_corpus(spec)
    if corpus[0].image.shape[-1] != gcfg.input_channels:
        raise ConfigurationError(f"input has {corpus[0].image.shape[-1]} channels, generator expects "
                                 f"{gcfg.input_channels}")
    privatized = privatize_corpus(params, corpus, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec, priv in zip(corpus, privatized):
        rel = Path(rec.path).relative_to(in_dir)
        target = out_dir / rel
        write_png(priv.image, target)
        written = bytes_to_unit(unit_to_bytes(priv.image))
        rows.append({"filename": rel.as_posix(), "identity_id": rec.identity_id, "attribute_id": rec.attribute_id,
                     "ssim": f"{ssim(rec.image, written):.10g}"})
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["filename", "identity_id", "attribute_id", "ssim"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)


def cmd_eval(checkpoint, config_path, seed=None):
    """Privacy + utility of a checkpoint on the config's held-out split; returns the CSV row."""
    cfg = _override_seed(load_config(config_path), seed)
    params = load_params(checkpoint)
    lam = params.extra_config.get("training", {}).get("lam", cfg.training.lam)
    corpus = load_corpus(cfg.dataset)
    _, held = split_corpus(cfg.dataset, corpus, cfg.sweep.holdout_fraction)
    privacy, utility = evaluate(params, held, cfg, lam, cfg.training.seed)
    from .config import provenance

    return csv_row(privacy, utility, provenance(cfg.to_dict())), privacy, utility


def cmd_sweep(config_path, seed=None):
    cfg = _override_seed(load_config(config_path), seed)
    return run_sweep(cfg)


def cmd_report(csv_path, out_dir):
    from .reporting import plot_sweep

    return plot_sweep(csv_path, out_dir)


def _row_text(row):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerow(row)
    return buf.getvalue()


def build_parser():
    parser = argparse.ArgumentParser(prog="sgap", description="Siamese adversarial image privatizer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("privatize", help="privatize a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="in_dir", required=True, help="input directory or SYNTHETIC")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="privacy and utility of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sweep", help="train and evaluate over the lambda grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("report", help="redraw sweep plots from sweep.csv")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            print(cmd_train(args.config, args.seed))
        elif args.command == "privatize":
            print(cmd_privatize(args.checkpoint, args.in_dir, args.out_dir, args.seed))
        elif args.command == "eval":
            row, privacy, utility = cmd_eval(args.checkpoint, args.config, args.seed)
            sys.stdout.write(_row_text(row))
            print(f"# lambda={privacy.lam:g} MI={privacy.mi_estimate:.4f} nats, "
                  f"misclassification={privacy.misclassification_rate:.3f}, SSIM={privacy.mean_ssim:.3f}, "
                  f"proxy accuracy={utility.accuracy_mean:.3f}+-{utility.accuracy_std:.3f} "
                  f"(baseline {utility.baseline_accuracy_mean:.3f})")
        elif args.command == "sweep":
            result = cmd_sweep(args.config, args.seed)
            print(result.csv_path)
            failed = [s for s in result.statuses if s != "ok"]
            if failed:
                print(f"{len(failed)} cell(s) failed", file=sys.stderr)
        elif args.command == "report":
            for path in cmd_report(args.csv, args.out):
                print(path)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for field, why in exc.problems:
            print(f"  {field}: {why}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}; last checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SGAPError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
