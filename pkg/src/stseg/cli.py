"""Command-line entry point: ``stseg <command> [options]``.

Exit codes:

    0  success
    1  unexpected internal error
    2  usage error (unknown command or flag)
    3  invalid configuration
    4  missing file or directory
    5  malformed dataset tree
    6  checkpoint missing a key, mismatched, or written for another config
    7  training or synthesis failure (non-finite loss, mask retries exhausted)

Failures print one JSON object ``{"error", "code", "message"}`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, load_config

log = logging.getLogger("stseg")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_DATASET, EXIT_CHECKPOINT, EXIT_TRAINING = range(8)


def _common(parser: argparse.ArgumentParser, config: bool = True) -> None:
    parser.add_argument("--seed", type=int, default=None, help="global seed; overrides the config value")
    if config:
        parser.add_argument("--config", type=Path, default=None, help="flat key = value config file")
        parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                            help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-preview", help="write (normal, mask, anomalous) triplets as PNG")
    _common(p)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("generate-corpus", help="write the procedural desk-scale dataset")
    _common(p, config=False)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--category", default="desk")

    p = sub.add_parser("train", help="train the student, the segmentation head, or both")
    _common(p)
    p.add_argument("--stage", choices=["student", "seg", "both"], default="both")
    p.add_argument("--run-dir", type=Path, default=None, help="default: <run_root>/<config hash>")

    p = sub.add_parser("infer", help="write 16-bit anomaly maps and JSON scores")
    _common(p)
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--input", type=Path, nargs="*", default=None,
                   help="images or directories; default is the configured category's test split")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="load checkpoints despite a config-hash mismatch")

    p = sub.add_parser("evaluate", help="score predictions against a category's ground truth")
    _common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True, help="category directory in MVTec layout")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("ablate", help="run the den/ed/seg ablation grid")
    _common(p)
    p.add_argument("--grid", choices=["table4"], default="table4")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("report", help="merge per-category metric JSON files into one table")
    _common(p, config=False)
    p.add_argument("--inputs", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _config(args) -> TrainConfig:
    return load_config(args.config, args.overrides, seed=args.seed)


def _announce(config: TrainConfig, command: str) -> None:
    log.info("%s: config_hash=%s seed=%d", command, config.config_hash(), config.seed)


def cmd_synth_preview(args) -> int:
    from PIL import Image

    from .data import load_image, load_mvtec_layout
    from .synth import SourcePool, synthesize
    from .trainer import synth_params

    cfg = _config(args)
    _announce(cfg, "synth-preview")
    ds = load_mvtec_layout(cfg.data_root, cfg.category)
    size = (cfg.image_size, cfg.image_size)
    pool = SourcePool.from_dir(cfg.source_dir or Path(cfg.data_root) / "sources", size)
    rng = np.random.default_rng(cfg.seed)
    params = synth_params(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        normal = load_image(ds.train_normals[i % len(ds.train_normals)], cfg.image_size)
        s = synthesize(normal, pool, rng, params)
        for name, arr in (("normal", s.normal_image), ("mask", s.mask), ("anomalous", s.anomalous_image)):
            Image.fromarray(np.rint(arr * 255).astype(np.uint8)).save(args.out / f"{i:03d}_{name}.png")
        log.info("sample %d: beta=%.3f anomalous fraction=%.3f", i, s.beta, s.anomalous_fraction)
    return EXIT_OK


def cmd_generate_corpus(args) -> int:
    from .data import generate_desk_corpus

    seed = 0 if args.seed is None else args.seed
    log.info("generate-corpus: seed=%d", seed)
    ds = generate_desk_corpus(args.out, seed, args.n_train, args.n_test, args.size, args.category)
    log.info("wrote %d training and %d test images to %s", len(ds.train_normals), len(ds.test_items), ds.root)
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _config(args)
    _announce(cfg, "train")
    record = train(cfg, args.stage, run_dir=args.run_dir)
    log.info("checkpoints: %s", json.dumps(record.checkpoints, sort_keys=True))
    return EXIT_OK


def _collect_inputs(paths: list[Path]) -> list[tuple[str, Path]]:
    from .synth import IMAGE_SUFFIXES

    items = []
    for p in paths:
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.suffix.lower() in IMAGE_SUFFIXES):
                items.append((str(f.relative_to(p).with_suffix("")), f))
        elif p.is_file():
            items.append((p.stem, p))
        else:
            raise FileNotFoundError(f"input not found: {p}")
    return items


def cmd_infer(args) -> int:
    from .data import load_mvtec_layout
    from .infer import Predictor, write_prediction

    cfg = _config(args)
    _announce(cfg, "infer")
    predictor = Predictor.from_run(cfg, args.run_dir, force=args.force)
    if args.input:
        items = _collect_inputs(args.input)
    else:
        items = [(it.key, it.path) for it in load_mvtec_layout(cfg.data_root, cfg.category).test_items]
    results = predictor.predict_paths([p for _, p in items])
    for (key, path), res in zip(items, results):
        write_prediction(args.out, key, res, path, cfg.top_t, cfg.config_hash())
    log.info("wrote %d predictions to %s", len(results), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_run, write_reports

    cfg = _config(args)
    _announce(cfg, "evaluate")
    report = evaluate_run(args.pred, args.gt, cfg, None if args.no_plots else args.out / "plots")
    csv_path, json_path = write_reports([report], args.out)
    log.info("%s", json.dumps(report.row(), sort_keys=True))
    log.info("wrote %s and %s", csv_path, json_path)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = _config(args)
    _announce(cfg, "ablate")
    table = run_ablation(cfg, args.out)
    log.info("wrote %d rows to %s", len(table), args.out / "ablation.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import MetricsReport, write_reports

    reports = []
    for path in args.inputs:
        if not path.is_file():
            raise FileNotFoundError(f"report not found: {path}")
        payload = json.loads(path.read_text())
        reports += [MetricsReport(**c) for c in payload["categories"]]
    reports.sort(key=lambda r: r.category)
    csv_path, _ = write_reports(reports, args.out, stem="report")
    print(csv_path.read_text(), end="")
    return EXIT_OK


COMMANDS = {
    "synth-preview": cmd_synth_preview,
    "generate-corpus": cmd_generate_corpus,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _fail(kind: str, code: int, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "code": code, "message": str(exc)}), file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    from .data import DatasetError
    from .networks import CheckpointError
    from .synth import SynthesisError
    from .trainer import TrainingError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail("missing-path", EXIT_MISSING, exc)
    except DatasetError as exc:
        return _fail("dataset", EXIT_DATASET, exc)
    except CheckpointError as exc:
        return _fail("checkpoint", EXIT_CHECKPOINT, exc)
    except (TrainingError, SynthesisError) as exc:
        return _fail("training", EXIT_TRAINING, exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        return _fail("internal", EXIT_INTERNAL, exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
