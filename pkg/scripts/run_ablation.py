"""Run the eight den/ed/seg rows on the desk corpus and print the table.

Each row trains from scratch with the desk profile, so the full grid takes
roughly eight times one desk run. Use ``--set student_steps=...`` to shorten it.
"""
import argparse
import logging
from pathlib import Path

from stseg.ablation import run_ablation
from stseg.config import desk_profile, parse_overrides
from stseg.data import generate_desk_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("ablation_out"))
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    dataset = generate_desk_corpus(args.out / "data", seed=0)
    cfg = desk_profile(data_root=str(args.out / "data"), category="desk", **parse_overrides(args.overrides))
    run_ablation(cfg, args.out, dataset=dataset)
    print((args.out / "ablation.csv").read_text(), end="")


if __name__ == "__main__":
    main()
