"""Deterministic synthetic data: labelled point clouds and procedural images."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _rng
from .errors import DataError, ParameterError


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    noisy_label: int
    clean_label: int


@dataclass(frozen=True)
class ClassificationDataset:
    """Column-oriented labelled dataset.

    ``clean_labels`` is the oracle ground truth and is only read by
    instrumentation code; training regimes look at ``noisy_labels`` alone.
    """

    features: np.ndarray
    noisy_labels: np.ndarray
    clean_labels: np.ndarray
    num_classes: int
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise DataError("features must be a 2D array")
        yn = np.array(self.noisy_labels, dtype=np.int64)
        yc = np.array(self.clean_labels, dtype=np.int64)
        if yn.shape != (x.shape[0],) or yc.shape != (x.shape[0],):
            raise DataError("label arrays must match the number of samples")
        k = int(self.num_classes)
        if k < 2:
            raise DataError("num_classes must be at least 2")
        for y in (yn, yc):
            if y.size and (y.min() < 0 or y.max() >= k):
                raise DataError("label outside [0, num_classes)")
        if not np.all(np.isfinite(x)):
            raise DataError("features must be finite")
        for a in (x, yn, yc):
            a.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "noisy_labels", yn)
        object.__setattr__(self, "clean_labels", yc)
        object.__setattr__(self, "num_classes", k)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> list[LabeledSample]:
        return [
            LabeledSample(self.features[i], int(self.noisy_labels[i]), int(self.clean_labels[i]))
            for i in range(len(self))
        ]

    @property
    def mislabeled(self) -> np.ndarray:
        """Oracle mask of samples whose observed label is wrong."""
        return self.noisy_labels != self.clean_labels

    def with_noisy_labels(self, noisy_labels, **metadata) -> "ClassificationDataset":
        meta = dict(self.metadata)
        meta.update(metadata)
        return ClassificationDataset(
            self.features, noisy_labels, self.clean_labels, self.num_classes, meta
        )

    def to_json(self) -> dict:
        out = {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "samples": [
                {"x": [float(v) for v in self.features[i]],
                 "y_noisy": int(self.noisy_labels[i]),
                 "y_clean": int(self.clean_labels[i])}
                for i in range(len(self))
            ],
        }
        if self.metadata:
            out["metadata"] = self.metadata
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "ClassificationDataset":
        try:
            samples = doc["samples"]
            k = int(doc["num_classes"])
            d = int(doc["feature_dim"])
            x = np.array([s["x"] for s in samples], dtype=np.float64).reshape(len(samples), d)
            yn = [s["y_noisy"] for s in samples]
            yc = [s["y_clean"] for s in samples]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed dataset document: {exc}") from exc
        return cls(x, yn, yc, k, dict(doc.get("metadata", {})))


def save_dataset(ds: ClassificationDataset, path) -> None:
    Path(path).write_text(json.dumps(ds.to_json(), sort_keys=True) + "\n")


def load_dataset(path) -> ClassificationDataset:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    return ClassificationDataset.from_json(doc)


MIN_MEAN_GAP = 1.2


def blob_radius(num_classes: int) -> float:
    return max(1.0, MIN_MEAN_GAP / (2 * np.sin(np.pi / num_classes)))


def make_blobs(num_classes: int, per_class: int, feature_dim: int = 2,
               spread: float = 0.3, seed: int = 0) -> ClassificationDataset:
    """Isotropic Gaussian clusters with means equally spaced on a circle.

    The circle has radius 1 unless that would put neighbouring means closer
    than MIN_MEAN_GAP, in which case it grows just enough to keep that gap.
    It lives in the first two coordinates; extra dimensions are pure noise
    around zero.
    """
    if num_classes < 2 or per_class < 1 or feature_dim < 2 or not spread > 0:
        raise ParameterError("make_blobs needs num_classes>=2, per_class>=1, feature_dim>=2, spread>0")
    rng = _rng.make_rng(seed, _rng.STREAM_BLOBS)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = blob_radius(num_classes)
    means = np.zeros((num_classes, feature_dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, feature_dim))
    meta = {"generator": "blobs", "seed": int(seed), "spread": float(spread), "radius": radius}
    return ClassificationDataset(x, labels, labels, num_classes, meta)


def make_rings(per_class: int, noise_std: float = 0.05, seed: int = 0,
               num_classes: int = 2, nuisance_dims: int = 0,
               nuisance_std: float = 0.2) -> ClassificationDataset:
    """Two concentric rings, class ``c`` at radius ``c + 1`` plus radial jitter.

    ``nuisance_dims`` appends label-independent Gaussian coordinates. They
    carry no signal but give every point an idiosyncratic direction a network
    can use to memorise a wrong label, as high-dimensional images do.
    """
    if num_classes != 2:
        raise ParameterError("make_rings only supports two classes")
    if per_class < 1 or not noise_std >= 0:
        raise ParameterError("make_rings needs per_class>=1 and noise_std>=0")
    if nuisance_dims < 0 or not nuisance_std >= 0:
        raise ParameterError("nuisance_dims and nuisance_std must be non-negative")
    rng = _rng.make_rng(seed, _rng.STREAM_RINGS)
    labels = np.repeat(np.arange(2), per_class)
    theta = rng.uniform(0.0, 2 * np.pi, labels.size)
    radius = labels + 1.0 + noise_std * rng.standard_normal(labels.size)
    x = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    if nuisance_dims:
        extra = nuisance_std * rng.standard_normal((labels.size, nuisance_dims))
        x = np.hstack([x, extra])
    meta = {"generator": "rings", "seed": int(seed), "noise_std": float(noise_std),
            "nuisance_dims": int(nuisance_dims), "nuisance_std": float(nuisance_std)}
    return ClassificationDataset(x, labels, labels, 2, meta)


@dataclass(frozen=True)
class LatentImage:
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError("pixels must have shape (H, W, 3)")
        if np.any(px < 0) or np.any(px > 1):
            raise DataError("pixel channels must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def pixel(self, row: int, col: int) -> np.ndarray:
        return self.pixels[row, col]


PATTERNS = ("checker", "gradient", "circles")


def make_latent_image(pattern: str, width: int = 64, height: int = 64,
                      seed: int = 0) -> LatentImage:
    """Procedural clean scene.

    checker: 8x8 cells of two seed-chosen colours (one dark, one light).
    gradient: red ramps 0->1 left to right, green top to bottom, blue constant.
    circles: a handful of filled discs on a flat background.

    Channels are quantised to multiples of 1/255.
    """
    if width < 8 or height < 8:
        raise ParameterError("width and height must be at least 8")
    if pattern not in PATTERNS:
        raise ParameterError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    rng = _rng.make_rng(seed, _rng.STREAM_IMAGE)
    rows, cols = np.mgrid[0:height, 0:width]
    img = np.empty((height, width, 3))
    if pattern == "checker":
        dark = rng.uniform(0.1, 0.35, 3)
        light = rng.uniform(0.65, 0.9, 3)
        cell_r = rows * 8 // height
        cell_c = cols * 8 // width
        odd = ((cell_r + cell_c) % 2).astype(bool)
        img[:] = dark
        img[odd] = light
    elif pattern == "gradient":
        img[..., 0] = cols / (width - 1)
        img[..., 1] = rows / (height - 1)
        img[..., 2] = rng.uniform(0.2, 0.8)
    else:
        img[:] = rng.uniform(0.0, 1.0, 3)
        n = int(rng.integers(3, 7))
        for _ in range(n):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            rad = rng.uniform(0.1, 0.3) * min(width, height)
            disc = (rows + 0.5 - cy) ** 2 + (cols + 0.5 - cx) ** 2 <= rad ** 2
            img[disc] = rng.uniform(0.0, 1.0, 3)
    return LatentImage(quantize(img))


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap channels to multiples of 1/255 so PPM round trips are exact."""
    return to_uint8(pixels).astype(np.float64) / 255.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Binary PPM (P6); a 2D array is written as grey."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = np.repeat(px[..., None], 3, axis=2)
    h, w, _ = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_uint8(px).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    pos += 1
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise DataError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(parts[1]), int(parts[2])
    raw = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0
