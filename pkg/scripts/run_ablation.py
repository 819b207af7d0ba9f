"""Run the full ablation grid and write results/ablation_report.json.

Generates the default dataset first if it is missing. Runs are cached under --work,
so an interrupted grid picks up where it stopped.
"""

import argparse
import sys
from pathlib import Path

from handfield.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", default=str(ROOT / "data" / "desk"))
    p.add_argument("--work", default=str(ROOT / "runs" / "ablation"))
    p.add_argument("--out", default=str(ROOT / "results" / "ablation_report.json"))
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    if not (Path(args.data) / "cameras.json").exists():
        code = cli(["gen-data", "--recipe", str(ROOT / "scripts" / "desk_recipe.json"), "--out", args.data])
        if code:
            sys.exit(code)
    sys.exit(cli(["ablate", "--data", args.data, "--work", args.work, "--out", args.out, "--steps", str(args.steps),
                  "--threads", str(args.threads)]))


if __name__ == "__main__":
    main()
