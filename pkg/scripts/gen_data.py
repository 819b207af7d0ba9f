"""Generate the default desk-scale dataset (8 cameras, 32 train / 4 held-out poses, 128x96)."""

import argparse
import json
from pathlib import Path

from handfield.dataset import save_dataset
from handfield.hand_model import toy_hand
from handfield.synth import SceneRecipe, generate_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="data/desk")
    p.add_argument("--recipe", help="recipe JSON; missing keys take defaults")
    args = p.parse_args()
    recipe = SceneRecipe.from_dict(json.loads(Path(args.recipe).read_text())) if args.recipe else SceneRecipe()
    ds = generate_dataset(recipe, toy_hand())
    save_dataset(ds, args.out)
    print(f"{len(ds.frames)} frames x {len(ds.cameras)} cameras written to {args.out}")


if __name__ == "__main__":
    main()
