#!/usr/bin/env python3
"""Build a 10,000-digit MNIST subset in IDX format from the `mnist` npm package.

The npm package (MIT, Juan Cazala) ships 10,000 MNIST digits as JSON arrays of
intensities in [0,1]. They are shuffled with a fixed seed and split into
9,000 training and 1,000 test digits, written with the standard MNIST file
names so the loaders treat the directory like a full MNIST root.

Usage: tools/fetch_mnist_subset.py [out_dir]   (default: data/mnist)
"""
import json
import pathlib
import random
import struct
import subprocess
import sys
import tarfile
import tempfile

PACKAGE = "mnist@1.1.0"
TRAIN_COUNT = 9000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", PACKAGE], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        tgz = next(pathlib.Path(tmp).glob("mnist-*.tgz"))
        with tarfile.open(tgz) as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            raw = json.loads((pathlib.Path(tmp) / "package/src/digits" /
                              f"{digit}.json").read_text())["data"]
            for i in range(len(raw) // 784):
                px = raw[i * 784:(i + 1) * 784]
                samples.append((digit, [min(255, max(0, round(v * 255))) for v in px]))
    random.Random(20200207).shuffle(samples)
    train, test = samples[:TRAIN_COUNT], samples[TRAIN_COUNT:]
    write_images(out / "train-images-idx3-ubyte", [s[1] for s in train])
    write_labels(out / "train-labels-idx1-ubyte", [s[0] for s in train])
    write_images(out / "t10k-images-idx3-ubyte", [s[1] for s in test])
    write_labels(out / "t10k-labels-idx1-ubyte", [s[0] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test digits to {out}")


if __name__ == "__main__":
    main()
