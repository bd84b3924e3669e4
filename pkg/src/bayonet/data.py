"""Synthetic desk-scale datasets.

Three generators with very different decision boundaries: Gaussian blobs
(linearly separable-ish, difficulty set by the spread of the class centers),
two interleaved spirals, and a checkerboard. All are class-balanced and
reproducible from a single seed; normals come from Box-Muller over the
toolkit's own generator so datasets are identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import TensorShape
from .rng import Rng

GAUSSIAN_BLOBS = "gaussian_blobs"
TWO_SPIRALS = "two_spirals"
CHECKERBOARD = "checkerboard"


@dataclass(frozen=True)
class SyntheticDataset:
    generator: str
    params: dict
    n_train: int
    n_test: int
    seed: int
    num_classes: int
    input_shape: TensorShape
    x_train: np.ndarray  # (n_train, dims, 1, 1)
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def _normals(rng: Rng, n: int) -> np.ndarray:
    """Standard normals via Box-Muller; u1 shifted into (0,1] to avoid log 0."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.uniform_array(m)
    u2 = rng.uniform_array(m)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return out[:n]


def _class_counts(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + (1 if c < extra else 0) for c in range(k)]


def _finish(generator, params, n_train, n_test, seed, k, dims, xs, ys, rng):
    # single shuffle per split keeps batches class-mixed even without the
    # trainer's own shuffling
    splits = []
    for x, y in ((xs[0], ys[0]), (xs[1], ys[1])):
        idx = np.arange(len(y))
        rng.shuffle(idx)
        splits.append((x[idx].reshape(len(y), dims, 1, 1), y[idx]))
    return SyntheticDataset(
        generator=generator,
        params=params,
        n_train=n_train,
        n_test=n_test,
        seed=seed,
        num_classes=k,
        input_shape=TensorShape(dims, 1, 1),
        x_train=splits[0][0],
        y_train=splits[0][1],
        x_test=splits[1][0],
        y_test=splits[1][1],
    )


def gaussian_blobs(classes=4, dims=8, spread=1.0, n_train=2000, n_test=1000, seed=0):
    """Isotropic unit-variance clusters around random centers.

    Centers are drawn once from N(0, spread^2 I); larger spread means easier
    separation.
    """
    rng = Rng(seed)
    centers = spread * _normals(rng, classes * dims).reshape(classes, dims)
    xs, ys = [], []
    for n in (n_train, n_test):
        counts = _class_counts(n, classes)
        x = np.empty((n, dims))
        y = np.empty(n, dtype=np.int64)
        row = 0
        for c, cnt in enumerate(counts):
            x[row : row + cnt] = centers[c] + _normals(rng, cnt * dims).reshape(cnt, dims)
            y[row : row + cnt] = c
            row += cnt
        xs.append(x)
        ys.append(y)
    params = {"classes": classes, "dims": dims, "spread": spread}
    return _finish(GAUSSIAN_BLOBS, params, n_train, n_test, seed, classes, dims, xs, ys, rng)


def two_spirals(noise=0.2, turns=1.5, n_train=2000, n_test=1000, seed=0):
    """Two interleaved planar spirals; class 1 is class 0 rotated by pi."""
    rng = Rng(seed)
    xs, ys = [], []
    for n in (n_train, n_test):
        counts = _class_counts(n, 2)
        x = np.empty((n, 2))
        y = np.empty(n, dtype=np.int64)
        row = 0
        for c, cnt in enumerate(counts):
            t = np.sqrt(rng.uniform_array(cnt)) * turns * 2.0 * np.pi
            px = t * np.cos(t) / (2.0 * np.pi)
            py = t * np.sin(t) / (2.0 * np.pi)
            if c == 1:
                px, py = -px, -py
            jitter = noise * _normals(rng, cnt * 2).reshape(cnt, 2)
            x[row : row + cnt, 0] = px + jitter[:, 0]
            x[row : row + cnt, 1] = py + jitter[:, 1]
            y[row : row + cnt] = c
            row += cnt
        xs.append(x)
        ys.append(y)
    params = {"noise": noise, "turns": turns}
    return _finish(TWO_SPIRALS, params, n_train, n_test, seed, 2, 2, xs, ys, rng)


def checkerboard(classes=2, cells=4, n_train=2000, n_test=1000, seed=0):
    """Uniform points on a cells x cells board; label = (col + row) mod classes.

    Class balance is enforced by rejection sampling each class's quota.
    """
    rng = Rng(seed)
    xs, ys = [], []
    for n in (n_train, n_test):
        counts = _class_counts(n, classes)
        x = np.empty((n, 2))
        y = np.empty(n, dtype=np.int64)
        row = 0
        for c, cnt in enumerate(counts):
            got = 0
            while got < cnt:
                p = rng.uniform_array(2) * cells
                label = (int(p[0]) + int(p[1])) % classes
                if label == c:
                    x[row + got] = p - cells / 2.0
                    got += 1
            y[row : row + cnt] = c
            row += cnt
        xs.append(x)
        ys.append(y)
    params = {"classes": classes, "cells": cells}
    return _finish(CHECKERBOARD, params, n_train, n_test, seed, classes, 2, xs, ys, rng)


def read_bten(path) -> np.ndarray:
    """Read a binary tensor container.

    Layout: 4-byte magic "BTEN", three little-endian uint32 dims (channels,
    height, width), then float32 little-endian payload; multiple tensors of
    the same shape may be concatenated. Returns float64 (n, c, h, w).
    """
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != b"BTEN":
            raise ValueError(f"{path}: not a BTEN container")
        c, h, w = np.frombuffer(head[4:], dtype="<u4")
        payload = np.frombuffer(fh.read(), dtype="<f4")
    per = int(c) * int(h) * int(w)
    if per == 0 or payload.size % per:
        raise ValueError(f"{path}: payload size {payload.size} not a multiple of {per}")
    return payload.astype(np.float64).reshape(-1, int(c), int(h), int(w))


def write_bten(path, arr) -> None:
    """Write one tensor (c,h,w) or a batch (n,c,h,w) as a BTEN container."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (c,h,w) or (n,c,h,w), got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(b"BTEN")
        fh.write(np.asarray(arr.shape[1:], dtype="<u4").tobytes())
        fh.write(arr.astype("<f4").tobytes())


def make_dataset(generator: str, **kwargs) -> SyntheticDataset:
    makers = {
        GAUSSIAN_BLOBS: gaussian_blobs,
        TWO_SPIRALS: two_spirals,
        CHECKERBOARD: checkerboard,
    }
    if generator not in makers:
        raise ValueError(f"unknown generator {generator!r}; choose from {sorted(makers)}")
    return makers[generator](**kwargs)
