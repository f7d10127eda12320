#!/usr/bin/env python3
# Copyright (c) 2026 The sepnet Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Rebuild data/mnist-subset/ from the digits bundled in the npm `mnist` package.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist-subset

The package ships 10,000 MNIST digits as per-class JSON arrays of k/255
intensities. Images are shuffled with a fixed seed and split into a
5,000-image training set and a 2,000-image held-out set, written in the
standard gzipped IDX format.
"""
import gzip
import json
import random
import struct
import sys


def write_idx(path_prefix, items):
    with gzip.GzipFile(path_prefix + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(items), 28, 28))
        for _, pixels in items:
            f.write(pixels)
    with gzip.GzipFile(path_prefix + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(items)))
        f.write(bytes(label for label, _ in items))


def main(src, dst):
    images = []
    for digit in range(10):
        with open(f"{src}/{digit}.json") as f:
            values = json.load(f)["data"]
        for i in range(len(values) // 784):
            chunk = values[i * 784:(i + 1) * 784]
            images.append((digit, bytes(int(round(v * 255)) for v in chunk)))
    random.Random(1234).shuffle(images)
    write_idx(f"{dst}/train", images[:5000])
    write_idx(f"{dst}/test", images[5000:7000])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
