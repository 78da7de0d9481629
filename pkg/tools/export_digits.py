"""Write scikit-learn's 8x8 digits as an IDX image/label pair.

    python tools/export_digits.py OUTDIR

Produces OUTDIR/images.idx (uint8, 1797x8x8, 0..255) and OUTDIR/labels.idx.
Needs scikit-learn, which is only a test dependency.
"""

import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

from robusteval.data import write_idx


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data")
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    write_idx(out / "images.idx", np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8))
    write_idx(out / "labels.idx", digits.target.astype(np.uint8))
    print(f"wrote {out / 'images.idx'} and {out / 'labels.idx'}")


if __name__ == "__main__":
    main()
