"""Write the fixed test crops under tests/data/ from scikit-image's bundled photos."""
from pathlib import Path

import numpy as np
from skimage import data

from gsimage.imio import write_png

# name -> (loader, row, col, size)
CROPS = {
    "astronaut_128": (data.astronaut, 40, 180, 128),
    "coffee_128": (data.coffee, 120, 200, 128),
    "chelsea_64": (data.chelsea, 100, 180, 64),
    "rocket_64": (data.rocket, 200, 300, 64),
    "astronaut_192": (data.astronaut, 0, 160, 192),
}


def main(out_dir=Path(__file__).resolve().parents[1] / "tests" / "data"):
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, (loader, r, c, size) in CROPS.items():
        img = np.ascontiguousarray(loader()[r : r + size, c : c + size, :3])
        write_png(out_dir / f"{name}.png", img / 255.0)
        print(name, img.shape)


if __name__ == "__main__":
    main()
