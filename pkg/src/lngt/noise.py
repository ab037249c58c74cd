"""Ground-truth corruption: label flips for classification, distractor
rectangles for multi-view image observations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _rng
from .datagen import ClassificationDataset, LatentImage, quantize, read_ppm, write_ppm
from .errors import DataError, ParameterError

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic corruption model, ``q[i, j] = P(noisy=j | clean=i)``."""

    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 2:
            raise ParameterError("transition matrix must be square with K >= 2")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ParameterError("transition matrix entries must be finite and non-negative")
        if np.max(np.abs(q.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ParameterError("transition matrix rows must sum to 1")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def K(self) -> int:
        return self.q.shape[0]

    def to_json(self) -> list:
        return self.q.tolist()

    @classmethod
    def from_json(cls, rows) -> "TransitionMatrix":
        return cls(np.array(rows, dtype=np.float64))


def _check_eta(eta: float) -> float:
    eta = float(eta)
    if not 0.0 <= eta < 1.0:
        raise ParameterError(f"eta must lie in [0, 1), got {eta}")
    return eta


def build_symmetric(K: int, eta: float) -> TransitionMatrix:
    eta = _check_eta(eta)
    if K < 2:
        raise ParameterError("K must be at least 2")
    q = np.full((K, K), eta / (K - 1))
    np.fill_diagonal(q, 1.0 - eta)
    return TransitionMatrix(q)


def build_asymmetric(K: int, eta: float,
                     pair_map: Mapping[int, int] | Sequence[int] | Callable[[int], int]) -> TransitionMatrix:
    """Pair flipping: class ``i`` turns into ``pair_map(i)`` with probability eta."""
    eta = _check_eta(eta)
    if K < 2:
        raise ParameterError("K must be at least 2")
    lookup = pair_map if callable(pair_map) else (lambda i: pair_map[i])
    q = np.zeros((K, K))
    for i in range(K):
        try:
            j = int(lookup(i))
        except (KeyError, IndexError) as exc:
            raise ParameterError(f"pair_map has no entry for class {i}") from exc
        if j == i or not 0 <= j < K:
            raise ParameterError(f"pair_map({i}) = {j} must be a different class in [0, {K})")
        q[i, i] = 1.0 - eta
        q[i, j] += eta
    return TransitionMatrix(q)


def apply_label_noise(dataset: ClassificationDataset, Q: TransitionMatrix,
                      seed: int) -> ClassificationDataset:
    """Resample every noisy label from the row of ``Q`` picked by its clean label."""
    if Q.K != dataset.num_classes:
        raise ParameterError(f"matrix is {Q.K}x{Q.K} but dataset has K={dataset.num_classes}")
    if np.any(dataset.noisy_labels != dataset.clean_labels):
        raise ParameterError("dataset already carries corrupted labels")
    rng = _rng.make_rng(seed, _rng.STREAM_LABEL_NOISE)
    cdf = np.cumsum(Q.q, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(len(dataset))
    rows = cdf[dataset.clean_labels]
    noisy = (u[:, None] >= rows).sum(axis=1)
    noisy = np.minimum(noisy, Q.K - 1)
    return dataset.with_noisy_labels(noisy, label_noise_seed=int(seed))


@dataclass(frozen=True)
class ViewSet:
    latent: LatentImage
    views: np.ndarray  # (V, H, W, 3)
    oracle_masks: np.ndarray  # (V, H, W) bool, True where a distractor was painted

    def __post_init__(self):
        views = np.array(self.views, dtype=np.float64)
        masks = np.array(self.oracle_masks, dtype=bool)
        h, w = self.latent.height, self.latent.width
        if views.ndim != 4 or views.shape[1:] != (h, w, 3):
            raise DataError("views must have shape (V, H, W, 3) matching the latent image")
        if masks.shape != views.shape[:3]:
            raise DataError("oracle masks must have shape (V, H, W)")
        for a in (views, masks):
            a.setflags(write=False)
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "oracle_masks", masks)

    @property
    def num_views(self) -> int:
        return self.views.shape[0]


def make_views(latent: LatentImage, num_views: int, distractor_fraction: float,
               patch_size_range: tuple[int, int] = (4, 12), seed: int = 0) -> ViewSet:
    """Copies of ``latent`` with solid-colour rectangles painted on.

    Rectangles are added one at a time until the painted fraction of a view
    first reaches ``distractor_fraction``. Each view is independent.
    """
    if num_views < 2:
        raise ParameterError("num_views must be at least 2")
    frac = float(distractor_fraction)
    if not 0.0 <= frac < 1.0:
        raise ParameterError("distractor_fraction must lie in [0, 1)")
    lo, hi = (int(v) for v in patch_size_range)
    h, w = latent.height, latent.width
    if lo < 1 or hi < lo or hi > min(h, w):
        raise ParameterError("patch_size_range must satisfy 1 <= lo <= hi <= image side")
    rng = _rng.make_rng(seed, _rng.STREAM_VIEWS)
    views = np.repeat(latent.pixels[None], num_views, axis=0)
    masks = np.zeros((num_views, h, w), dtype=bool)
    target = frac * h * w
    for v in range(num_views):
        covered = 0
        while covered < target:
            ph, pw = rng.integers(lo, hi + 1, size=2)
            top = int(rng.integers(0, h - ph + 1))
            left = int(rng.integers(0, w - pw + 1))
            color = quantize(rng.uniform(0.0, 1.0, 3))
            views[v, top:top + ph, left:left + pw] = color
            masks[v, top:top + ph, left:left + pw] = True
            covered = int(masks[v].sum())
    return ViewSet(latent, views, masks)


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of a flattened boolean mask, starting with a False run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape) -> np.ndarray:
    total = int(np.prod(shape))
    if sum(runs) != total:
        raise DataError(f"run lengths sum to {sum(runs)}, expected {total}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def save_viewset(vs: ViewSet, directory, name: str = "viewset") -> Path:
    """Write one PPM per view plus a JSON sidecar; returns the sidecar path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / f"{name}_latent.ppm", vs.latent.pixels)
    view_names = []
    for v in range(vs.num_views):
        fname = f"{name}_view_{v:03d}.ppm"
        write_ppm(out / fname, vs.views[v])
        view_names.append(fname)
    doc = {
        "latent": f"{name}_latent.ppm",
        "views": view_names,
        "height": vs.latent.height,
        "width": vs.latent.width,
        "oracle_masks": [rle_encode(m) for m in vs.oracle_masks],
    }
    sidecar = out / f"{name}.json"
    sidecar.write_text(json.dumps(doc, sort_keys=True) + "\n")
    return sidecar


def load_viewset(sidecar) -> ViewSet:
    sidecar = Path(sidecar)
    try:
        doc = json.loads(sidecar.read_text())
        base = sidecar.parent
        latent = LatentImage(read_ppm(base / doc["latent"]))
        views = np.stack([read_ppm(base / f) for f in doc["views"]])
        shape = (latent.height, latent.width)
        masks = np.stack([rle_decode(r, shape) for r in doc["oracle_masks"]])
    except (KeyError, TypeError, json.JSONDecodeError, FileNotFoundError) as exc:
        raise DataError(f"{sidecar}: malformed view set ({exc})") from exc
    return ViewSet(latent, views, masks)
