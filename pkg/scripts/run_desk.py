"""Generate the desk corpus, train both stages and print the held-out metrics.

    python3 scripts/run_desk.py --out desk_out [--seed 0] [--set student_steps=200]
"""
import argparse
import json
import logging
import time
from pathlib import Path

from stseg.config import desk_profile, parse_overrides
from stseg.data import generate_desk_corpus
from stseg.infer import Predictor, evaluate_predictor
from stseg.metrics import write_reports
from stseg.trainer import TrainData, train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("desk_out"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    dataset = generate_desk_corpus(args.out / "data", seed=0)
    cfg = desk_profile(
        data_root=str(args.out / "data"), category="desk", run_root=str(args.out / "runs"),
        seed=args.seed, **parse_overrides(args.overrides),
    )
    start = time.perf_counter()
    record = train(cfg, data=TrainData.from_config(cfg, dataset))
    elapsed = time.perf_counter() - start

    report = evaluate_predictor(Predictor.from_run(cfg), dataset, plots_dir=args.out / "plots")
    write_reports([report], args.out / "metrics")
    print(json.dumps({"config_hash": record.config_hash, "train_seconds": round(elapsed, 1), **report.row()}, indent=2))


if __name__ == "__main__":
    main()
