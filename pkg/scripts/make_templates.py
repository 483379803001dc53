"""Regenerate the checked-in toy-prior template PNGs."""

import argparse
from pathlib import Path

from luminark.core import save_png
from luminark.templates import TEMPLATE_SIZES, generate_templates

ROOT = Path(__file__).resolve().parents[1] / "src" / "luminark" / "data"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=ROOT)
    args = ap.parse_args()
    for size in TEMPLATE_SIZES:
        folder = args.out / f"templates_{size}"
        folder.mkdir(parents=True, exist_ok=True)
        for j, img in enumerate(generate_templates(size)):
            save_png(folder / f"template_{j:02d}.png", img)
        print(f"wrote {folder}")


if __name__ == "__main__":
    main()
