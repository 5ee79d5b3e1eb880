"""Fetch CIFAR-10 and write it in the official binary layout.

The canonical tarball host is tried first.  When it is unreachable, the npm
package ``tfjs-cifar10`` (lossless PNG sprites plus label JSON) is fetched
with ``npm pack`` and converted record by record.  The PNG route needs Pillow.

    python scripts/fetch_cifar10.py [--root DIR]

Output: ``DIR/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin``.
"""
import argparse
import io
import json
import os
import subprocess
import sys
import tarfile
import tempfile
import urllib.request
from pathlib import Path

import numpy as np

URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
NAMES = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
RECORD = 3073


def from_tarball(out: Path) -> None:
    with urllib.request.urlopen(URL, timeout=60) as r:
        blob = r.read()
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for m in tar.getmembers():
            if m.name.endswith(".bin"):
                (out / Path(m.name).name).write_bytes(tar.extractfile(m).read())


def from_npm(out: Path) -> None:
    from PIL import Image

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "tfjs-cifar10", "--silent"], cwd=tmp, check=True, stdout=subprocess.DEVNULL)
        tgz = next(Path(tmp).glob("tfjs-cifar10-*.tgz"))
        with tarfile.open(tgz) as tar:
            tar.extractall(tmp)
        pkg = Path(tmp) / "package"
        train_labels = np.asarray(json.loads((pkg / "train_lables.json").read_text()), dtype=np.uint8)
        test_labels = np.asarray(json.loads((pkg / "test_lables.json").read_text()), dtype=np.uint8)
        for i, name in enumerate(NAMES):
            pixels = np.asarray(Image.open(pkg / f"{name}.png").convert("RGB"))  # (n, 1024, 3)
            n = pixels.shape[0]
            labels = test_labels if name == "test_batch" else train_labels[i * 10000:(i + 1) * 10000]
            planes = pixels.transpose(0, 2, 1).reshape(n, 3072)
            (out / f"{name}.bin").write_bytes(np.concatenate([labels[:, None], planes], axis=1).tobytes())


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default=os.environ.get("WAS_DATA_ROOT", "data"))
    args = ap.parse_args()
    out = Path(args.root) / "cifar-10-batches-bin"
    out.mkdir(parents=True, exist_ok=True)
    try:
        from_tarball(out)
    except OSError as exc:
        print(f"tarball unavailable ({exc}); converting the npm package", file=sys.stderr)
        from_npm(out)
    for name in NAMES:
        size = (out / f"{name}.bin").stat().st_size
        if size != 10000 * RECORD:
            print(f"{name}.bin has {size} bytes, expected {10000 * RECORD}", file=sys.stderr)
            return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
