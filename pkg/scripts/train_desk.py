"""Train the full model on a dataset and report held-out PSNR per camera."""

import argparse
import json
import time

from handfield.config import desk_config
from handfield.dataset import load_dataset
from handfield.metrics import evaluate
from handfield.training import train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", default="data/desk")
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    ds = load_dataset(args.data)
    cfg = desk_config(steps=args.steps).with_(train={"seed": args.seed})
    t0 = time.perf_counter()
    av = train(ds, cfg, args.out, log=lambda rec: print(json.dumps(rec), flush=True))
    ev = evaluate(av, ds, "heldout")
    print(json.dumps({"heldout_psnr": ev["psnr"], "per_camera": ev["psnr_per_camera"],
                      "seconds": time.perf_counter() - t0}, indent=1))


if __name__ == "__main__":
    main()
