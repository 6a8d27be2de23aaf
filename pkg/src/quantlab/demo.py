"""Desk-scale demo bundle: a 10-class synthetic image task and a small CNN.

Images are 1x16x16 with values in [0, 1]: each class owns a smooth random
prototype field, and a sample is the prototype at a random gain plus white
noise, shifted to mid-gray. The model is built analytically:

* a 3x3 conv bank of six classic unit-norm kernels (identity, box blur, two
  Sobel edges, Laplacian, diagonal edge),
* relu and 2x2 max pooling,
* a linear readout whose rows are centered class feature centroids, with the
  bias completing a nearest-centroid discriminant.

Everything is a pure function of one seed. The brightness/contrast
corruptions move activations away from any precomputed calibration range,
which is exactly the regime where range-tracking schemes earn their keep.
"""

from __future__ import annotations

import os

import numpy as np

from .nn import (
    Dataset,
    ModelGraph,
    conv2d,
    flatten,
    forward_float,
    linear,
    maxpool,
    relu,
    save_dataset,
    save_model,
)
from .tensor import Tensor

NUM_CLASSES = 10
IMAGE_HW = 16
PROTO_GAIN = 0.35
NOISE_SIGMA = 0.12
GAIN_RANGE = (0.7, 1.3)
_FIT_PER_CLASS = 40

MODEL_FILE = "model.qmod"
CALIB_FILE = "calib.qds"
TEST_FILE = "test.qds"


def _prototypes(rng: np.random.Generator) -> np.ndarray:
    """Class prototype fields from a low-frequency cosine basis, unit RMS."""
    n = IMAGE_HW
    grid = (np.arange(n) + 0.5) / n
    planes = []
    freqs = []
    for u in range(4):
        for v in range(4):
            if u == 0 and v == 0:
                continue  # no DC term: prototypes stay zero-mean
            planes.append(
                np.cos(np.pi * u * grid)[:, None] * np.cos(np.pi * v * grid)[None, :]
            )
            freqs.append((u, v))
    basis = np.stack(planes)
    protos = np.empty((NUM_CLASSES, n, n))
    for k in range(NUM_CLASSES):
        coef = rng.normal(0.0, 1.0, size=len(freqs))
        p = np.tensordot(coef, basis, axes=1)
        p -= p.mean()
        protos[k] = p / np.sqrt(np.mean(p * p))
    return protos


def _sample(rng: np.random.Generator, proto: np.ndarray) -> Tensor:
    g = rng.uniform(*GAIN_RANGE)
    noise = rng.normal(0.0, NOISE_SIGMA, proto.shape)
    img = np.clip(0.5 + g * PROTO_GAIN * proto + noise, 0.0, 1.0)
    return Tensor.from_array(img[None, :, :].astype(np.float32).astype(np.float64))


def _draw_split(seed: int, tag: int, protos: np.ndarray, count: int) -> Dataset:
    rng = np.random.default_rng([seed, tag])
    samples, labels = [], []
    for _ in range(count):
        k = int(rng.integers(0, NUM_CLASSES))
        samples.append(_sample(rng, protos[k]))
        labels.append(k)
    return Dataset(tuple(samples), tuple(labels))


def _unit(k: np.ndarray) -> np.ndarray:
    return k / np.sqrt(np.sum(k * k))


def _feature_kernels() -> np.ndarray:
    banks = [
        [[1, 2, 1], [2, 4, 2], [1, 2, 1]],          # center-weighted smooth
        [[1, 1, 1], [1, 1, 1], [1, 1, 1]],          # box blur
        [[1, 1, 1], [2, 2, 2], [1, 1, 1]],          # horizontal-weighted blur
        [[1, 2, 1], [1, 2, 1], [1, 2, 1]],          # vertical-weighted blur
        [[2, 1, 1], [1, 2, 1], [1, 1, 2]],          # diagonal-weighted blur
        [[1, 1, 2], [1, 2, 1], [2, 1, 1]],          # anti-diagonal-weighted blur
    ]
    return np.stack([_unit(np.array(b, dtype=np.float64)) for b in banks])[:, None, :, :]


def _feature_layers(conv_bias: np.ndarray | None = None):
    w = Tensor.from_array(_feature_kernels())
    b = None if conv_bias is None else Tensor.from_array(conv_bias)
    return [conv2d(w, b, stride=(1, 1), padding=(0, 0)), relu(), maxpool((2, 2)), flatten()]


def build_demo(
    seed: int = 0, calib_size: int = 512, test_size: int = 1000
) -> tuple[ModelGraph, Dataset, Dataset]:
    """Model plus calibration and test splits, all from one seed."""
    rng = np.random.default_rng([seed, 1])
    protos = _prototypes(rng)
    fit = _draw_split(seed, 2, protos, _FIT_PER_CLASS * NUM_CLASSES)
    feats = _feature_layers()
    stem = ModelGraph.from_layers(feats, (1, IMAGE_HW, IMAGE_HW))
    dim = stem.layer_output_shapes()[-1][0]
    sums = np.zeros((NUM_CLASSES, dim))
    counts = np.zeros(NUM_CLASSES)
    for x, k in zip(fit.samples, fit.labels):
        f, _ = forward_float(stem, x)
        sums[k] += f.array()
        counts[k] += 1
    centroids = sums / counts[:, None]
    center = centroids.mean(axis=0)
    rows = centroids - center
    # Nearest-centroid readout in centered feature space:
    #   logit_k = rows_k . (f - center) - |rows_k|^2 / 2
    bias = -rows @ center - 0.5 * np.sum(rows * rows, axis=1)
    head = linear(Tensor.from_array(rows), Tensor.from_array(bias))
    model = ModelGraph.from_layers(feats + [head], (1, IMAGE_HW, IMAGE_HW))

    calib = _draw_split(seed, 3, protos, calib_size)
    test = _draw_split(seed, 4, protos, test_size)
    return model, calib, test


def make_demo(
    out_dir: str, seed: int = 0, calib_size: int = 512, test_size: int = 1000
) -> dict[str, str]:
    """Write model.qmod, calib.qds and test.qds; returns their paths."""
    model, calib, test = build_demo(seed, calib_size, test_size)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "model": os.path.join(out_dir, MODEL_FILE),
        "calib": os.path.join(out_dir, CALIB_FILE),
        "test": os.path.join(out_dir, TEST_FILE),
    }
    save_model(model, paths["model"])
    save_dataset(calib, paths["calib"])
    save_dataset(test, paths["test"])
    return paths
