#!/usr/bin/env python3
"""Download the Fashion-MNIST training IDX files and unpack them.

Usage:
    python scripts/fetch_fashion_mnist.py [DEST_DIR]

DEST_DIR defaults to ./data.  After a successful run, point ORTHOJAC_DATA
at DEST_DIR (or pass --data DEST_DIR to `orthojac train`).
"""

import gzip
import os
import sys
import urllib.request

BASE_URL = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"
FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
)


def fetch(dest_dir: str) -> None:
    os.makedirs(dest_dir, exist_ok=True)
    for name in FILES:
        out_path = os.path.join(dest_dir, name[:-3])
        if os.path.exists(out_path):
            print(f"already present: {out_path}")
            continue
        url = BASE_URL + name
        print(f"downloading {url}")
        with urllib.request.urlopen(url) as response:
            compressed = response.read()
        with open(out_path, "wb") as fh:
            fh.write(gzip.decompress(compressed))
        print(f"wrote {out_path} ({os.path.getsize(out_path)} bytes)")
    print(f"done; set ORTHOJAC_DATA={dest_dir}")


if __name__ == "__main__":
    fetch(sys.argv[1] if len(sys.argv) > 1 else "data")
