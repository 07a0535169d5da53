"""Recompute the frozen universal constants on flat space and write calibration.json."""

import argparse
import json
from pathlib import Path

from fkhess import bounds


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    default = Path(bounds.__file__).with_name(bounds.CALIBRATION_FILE)
    parser.add_argument("--out", type=Path, default=default)
    parser.add_argument("--n-paths", type=int, default=bounds.CalibrationSettings.n_paths)
    parser.add_argument("--workers", type=int, default=None)
    args = parser.parse_args()
    settings = bounds.CalibrationSettings(n_paths=args.n_paths)
    table = bounds.calibrate_universal_constants(settings, workers=args.workers)
    args.out.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out}")
    for name in ("w2_martingale_moment", "product_term_moment"):
        for key, value in sorted(table[name]["values"].items()):
            print(f"{name} {key}: {value:.6g}")
    print(f"entropy_offset: {table['entropy_offset']['value']:.6g}")


if __name__ == "__main__":
    main()
