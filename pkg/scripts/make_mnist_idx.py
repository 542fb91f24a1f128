"""Write the 5000-image MNIST sample bundled with mlxtend as IDX files.

    python3 scripts/make_mnist_idx.py OUT_DIR
    ldlmix synth --images OUT_DIR/images.idx --labels OUT_DIR/labels.idx --out syn5k.ldl

Needs the optional ``data`` extra (``pip install mlxtend``). Any IDX pair
(for instance the full 60000-image training set) works with ``synth`` too.
"""
import sys
from pathlib import Path

import numpy as np

from ldlmix.dataset import write_idx_images, write_idx_labels


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print(__doc__, file=sys.stderr)
        return 2
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    out = Path(argv[0])
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(x.reshape(-1, 28, 28).astype(np.uint8), out / "images.idx")
    write_idx_labels(y, out / "labels.idx")
    print(f"wrote {len(y)} images to {out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
