"""2D coordinate-field reconstruction from distractor-corrupted views.

A positional-encoding MLP maps pixel coordinates ``(u, v)`` to RGB. Every view
shares the same coordinates, so the field can only represent one image; it is
fitted to all views at once with either the plain squared error or the masked
squared error, where each observed pixel carries a weight ``M_r`` estimated
from a two-component GMM on that pixel's loss.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _rng
from .datagen import write_ppm
from .errors import ParameterError
from .mixture import MixtureFit, fit_gmm, monotone_posterior_clean, normalize_losses
from .nn import MlpModel, make_optimizer
from .noise import ViewSet

FIELD_REGIMES = ("plain", "masked")


def encode(coords, num_freqs: int) -> np.ndarray:
    """``[sin(2^j pi u), cos(2^j pi u), sin(2^j pi v), cos(2^j pi v)]`` for j < L."""
    c = np.asarray(coords, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(num_freqs)
    u = c[:, :1] * freqs
    v = c[:, 1:2] * freqs
    return np.concatenate([np.sin(u), np.cos(u), np.sin(v), np.cos(v)], axis=1)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class FieldModel:
    def __init__(self, num_freqs: int = 6, hidden=(64, 64), activation: str = "relu",
                 seed: int | None = 0):
        if num_freqs < 1:
            raise ParameterError("num_freqs must be positive")
        self.num_freqs = int(num_freqs)
        rng = None if seed is None else _rng.make_rng(seed, _rng.STREAM_FIELD_INIT)
        self.mlp = MlpModel([4 * self.num_freqs, *hidden, 3], activation, rng=rng, zero=seed is None)

    @classmethod
    def zeros(cls, num_freqs: int = 6, hidden=(64, 64)) -> "FieldModel":
        return cls(num_freqs, hidden, seed=None)

    def forward(self, coords, keep_cache: bool = False):
        raw = self.mlp.forward(encode(coords, self.num_freqs), keep_cache=keep_cache)
        if keep_cache:
            z, cache = raw
            return sigmoid(z), cache
        return sigmoid(raw)


def _check_coords(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ParameterError("coords must have shape (N, 2)")
    if np.any(c < 0) or np.any(c > 1) or not np.all(np.isfinite(c)):
        raise ParameterError("coordinates must lie in [0, 1]^2")
    return c


def render(model: FieldModel, coords) -> np.ndarray:
    return model.forward(_check_coords(coords))


def pixel_centers(height: int, width: int) -> np.ndarray:
    """Row-major ``(u, v)`` of pixel centres; ``u`` runs along columns."""
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([(cols.ravel() + 0.5) / width, (rows.ravel() + 0.5) / height], axis=1)


def render_image(model: FieldModel, height: int, width: int) -> np.ndarray:
    return render(model, pixel_centers(height, width)).reshape(height, width, 3)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass(frozen=True)
class PixelObservation:
    view: int
    coord: tuple[float, float]
    observed_color: tuple[float, float, float]
    oracle_distractor: bool
    mask_weight: float = 1.0


@dataclass
class PixelBatch:
    """Columnar pixel observations; ``mask`` defaults to all ones."""

    coords: np.ndarray
    colors: np.ndarray
    oracle: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    views: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.coords)
        if n == 0:
            raise ParameterError("pixel batch is empty")
        if len(self.colors) != n:
            raise ParameterError("coords and colors must have the same length")
        if self.mask is None:
            self.mask = np.ones(n)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if np.any(self.mask < 0) or np.any(self.mask > 1):
            raise ParameterError("mask weights must lie in [0, 1]")
        if self.oracle is None:
            self.oracle = np.zeros(n, dtype=bool)
        if self.views is None:
            self.views = np.zeros(n, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.coords)

    def observations(self) -> list[PixelObservation]:
        return [PixelObservation(int(self.views[i]), tuple(self.coords[i]), tuple(self.colors[i]),
                                 bool(self.oracle[i]), float(self.mask[i])) for i in range(len(self))]

    @classmethod
    def from_observations(cls, obs) -> "PixelBatch":
        obs = list(obs)
        return cls([o.coord for o in obs], [o.observed_color for o in obs],
                   [o.oracle_distractor for o in obs], [o.mask_weight for o in obs],
                   [o.view for o in obs])

    def subset(self, idx) -> "PixelBatch":
        return PixelBatch(self.coords[idx], self.colors[idx], self.oracle[idx], self.mask[idx],
                          self.views[idx])


def flatten_views(vs: ViewSet) -> PixelBatch:
    """All pixels of all views, view-major then row-major."""
    V, H, W = vs.views.shape[:3]
    coords = np.tile(pixel_centers(H, W), (V, 1))
    return PixelBatch(coords, vs.views.reshape(-1, 3), vs.oracle_masks.ravel(), None,
                      np.repeat(np.arange(V), H * W))


def _squared_residuals(batch: PixelBatch, model: FieldModel):
    pred, cache = model.forward(_check_coords(batch.coords), keep_cache=True)
    diff = pred - batch.colors
    return pred, cache, diff, np.sum(diff * diff, axis=1)


def loss_plain(batch: PixelBatch, model: FieldModel):
    """``sum_r ||I_hat_r - I_r||^2`` and the per-pixel squared residuals."""
    _, _, _, per = _squared_residuals(batch, model)
    return float(per.sum()), per


def loss_masked(batch: PixelBatch, model: FieldModel):
    """``sum_r M_r ||I_hat_r - I_r||^2``.

    Identical to comparing the blend ``M_r I_hat_r + (1 - M_r) I_r`` with
    ``I_r``; the returned per-pixel values are the unweighted residuals.
    """
    _, _, _, per = _squared_residuals(batch, model)
    return float(np.sum(batch.mask * per)), per


def loss_and_grads(batch: PixelBatch, model: FieldModel, masked: bool):
    """Loss value, per-pixel residuals and parameter gradients of the loss."""
    pred, cache, diff, per = _squared_residuals(batch, model)
    weight = batch.mask if masked else np.ones(len(batch))
    value = float(np.sum(weight * per))
    g_pred = 2.0 * weight[:, None] * diff
    g_z = g_pred * pred * (1.0 - pred)
    return value, per, model.mlp.backward(cache, g_z)


def update_masks(per_pixel_losses, warmup_done: bool, current=None, hard: bool = False):
    """New mask weights (and the GMM used) from one pass of per-pixel losses.

    Before warmup every weight stays at 1 (or at ``current`` when given).
    """
    losses = np.asarray(per_pixel_losses, dtype=np.float64)
    if not warmup_done:
        keep = np.ones_like(losses) if current is None else np.asarray(current, dtype=np.float64)
        return keep, None
    norm = normalize_losses(losses)
    fit = fit_gmm(norm)
    w = np.clip(monotone_posterior_clean(fit, norm), 0.0, 1.0)
    if hard:
        w = (w >= 0.5).astype(np.float64)
    return w, fit


def auc(scores, positives) -> float:
    """Rank AUC of ``scores`` for the boolean ``positives`` (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    # average ranks over tied groups
    uniq, start, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    avg = start + (counts - 1) / 2.0 + 1.0
    ranks[order] = np.repeat(avg, counts)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class FieldConfig:
    regime: str = "plain"
    steps: int = 6000
    batch_size: int = 1024
    learning_rate: float = 5e-3
    lr_final_fraction: float = 1.0
    eval_average: float = 0.0
    optimizer: str = "adam"
    warmup_steps: int = 2000
    mask_refresh_interval: int = 500
    checkpoint_interval: int = 500
    hard_mask: bool = False
    num_freqs: int = 6
    hidden: tuple = (64, 64)
    hist_bins: int = 20
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.regime not in FIELD_REGIMES:
            raise ParameterError(f"field regime must be one of {FIELD_REGIMES}")
        if self.steps < 1 or self.batch_size < 1:
            raise ParameterError("steps and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if not 0 < self.lr_final_fraction <= 1:
            raise ParameterError("lr_final_fraction must lie in (0, 1]")
        if not 0 <= self.eval_average < 1:
            raise ParameterError("eval_average must lie in [0, 1)")
        if self.warmup_steps < 0 or self.mask_refresh_interval < 1 or self.checkpoint_interval < 1:
            raise ParameterError("warmup_steps >= 0, refresh and checkpoint intervals >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError("optimizer must be sgd or adam")
        if self.num_freqs < 1 or self.hist_bins < 1:
            raise ParameterError("num_freqs and hist_bins must be positive")

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "FieldConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown field config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Checkpoint:
    step: int
    psnr_vs_latent: float
    mean_clean_loss: float
    mean_distractor_loss: float
    histogram: tuple  # (edges, clean_counts, distractor_counts)
    render: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)  # (V, H, W)
    gmm: Optional[MixtureFit] = None
    mask_auc: Optional[float] = None

    @property
    def loss_ratio(self) -> float:
        return self.mean_distractor_loss / self.mean_clean_loss


@dataclass
class FieldTrace:
    checkpoints: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)  # (step, auc, MixtureFit)

    def at(self, step: int) -> Checkpoint:
        for c in self.checkpoints:
            if c.step == step:
                return c
        raise KeyError(step)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def _checkpoint(model, pixels: PixelBatch, vs: ViewSet, config: FieldConfig, step: int,
                gmm, mask_auc_value) -> Checkpoint:
    H, W = vs.latent.height, vs.latent.width
    _, per = loss_plain(pixels, model)
    img = render_image(model, H, W)
    oracle = pixels.oracle
    norm = normalize_losses(per)
    edges = np.linspace(0.0, 1.0, config.hist_bins + 1)
    cc, _ = np.histogram(norm[~oracle], bins=edges)
    dc, _ = np.histogram(norm[oracle], bins=edges)
    clean_mean = float(per[~oracle].mean()) if np.any(~oracle) else float("nan")
    dist_mean = float(per[oracle].mean()) if np.any(oracle) else float("nan")
    return Checkpoint(step, psnr(img, vs.latent.pixels), clean_mean, dist_mean, (edges, cc, dc),
                      img, pixels.mask.reshape(vs.views.shape[:3]).copy(), gmm, mask_auc_value)


def fit_field(views: ViewSet, config: FieldConfig | None = None, **overrides) -> tuple[FieldModel, FieldTrace]:
    """Fit a field to every pixel of every view.

    Minibatches walk a fresh random permutation of all observed pixels, so
    each pixel is used once per pass. The masked regime recomputes ``M_r`` at
    ``warmup_steps`` and every ``mask_refresh_interval`` steps after, from a
    full evaluation pass. Checkpoints are taken at step 0, every
    ``checkpoint_interval`` steps, and at the end.

    With ``eval_average > 0`` an exponential moving average of the weights
    is kept alongside the optimised ones. Mask refreshes, checkpoints and the
    returned model all use the average, which removes the step-to-step
    jitter of the optimiser from every measurement.
    """
    if config is None:
        config = FieldConfig(**overrides)
    elif overrides:
        config = FieldConfig(**{**config.to_json(), **overrides})
    config.validate()
    model = FieldModel(config.num_freqs, config.hidden, seed=config.seed)
    if config.eval_average > 0:
        shadow = FieldModel.zeros(config.num_freqs, config.hidden)
        shadow.mlp = model.mlp.copy()
    else:
        shadow = model
    opt = make_optimizer(config.optimizer, config.learning_rate)
    rng = _rng.make_rng(config.seed, _rng.STREAM_FIELD_BATCH)
    pixels = flatten_views(views)
    n = len(pixels)
    masked = config.regime == "masked"
    trace = FieldTrace()
    order = rng.permutation(n)
    cursor = 0
    last_gmm = None
    last_auc = None

    def refresh(step):
        nonlocal last_gmm, last_auc
        _, per = loss_plain(pixels, shadow)
        w, fit = update_masks(per, warmup_done=True, hard=config.hard_mask)
        pixels.mask = w
        last_gmm = fit
        last_auc = auc(1.0 - w, pixels.oracle)
        trace.refreshes.append((step, last_auc, fit))

    trace.checkpoints.append(_checkpoint(shadow, pixels, views, config, 0, None, None))
    for step in range(1, config.steps + 1):
        if cursor + config.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        batch = pixels.subset(idx)
        # exponential decay from learning_rate to learning_rate * lr_final_fraction
        opt.lr = config.learning_rate * config.lr_final_fraction ** ((step - 1) / max(config.steps - 1, 1))
        _, _, grads = loss_and_grads(batch, model, masked)
        opt.step(model.mlp, [g / len(idx) for g in grads])
        if shadow is not model:
            for avg, cur in zip(shadow.mlp.params, model.mlp.params):
                avg += (1.0 - config.eval_average) * (cur - avg)
        if masked and step >= config.warmup_steps and (step - config.warmup_steps) % config.mask_refresh_interval == 0:
            refresh(step)
        if step % config.checkpoint_interval == 0 or step == config.steps:
            trace.checkpoints.append(_checkpoint(shadow, pixels, views, config, step, last_gmm, last_auc))
    return shadow, trace


def write_outputs(trace: FieldTrace, config: FieldConfig, out_dir, extra_summary: dict | None = None) -> dict:
    """renders/step_<n>.ppm, mask_<n>.ppm, hist_<n>.csv, trace.csv, summary.json."""
    out = Path(out_dir)
    (out / "renders").mkdir(parents=True, exist_ok=True)
    rows = []
    for c in trace.checkpoints:
        write_ppm(out / "renders" / f"step_{c.step}.ppm", c.render)
        # views stacked vertically, one grey band per view
        write_ppm(out / f"mask_{c.step}.ppm", c.mask.reshape(-1, c.mask.shape[-1]))
        edges, cc, dc = c.histogram
        with open(out / f"hist_{c.step}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["bin_left", "bin_right", "clean_count", "distractor_count"])
            for i in range(len(cc)):
                wr.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(cc[i]), int(dc[i])])
        rows.append([c.step, repr(c.psnr_vs_latent), repr(c.mean_clean_loss), repr(c.mean_distractor_loss)])
    with open(out / "trace.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "psnr_vs_latent", "mean_clean_loss", "mean_distractor_loss"])
        wr.writerows(rows)
    final = trace.final
    summary = {
        "final_step": final.step,
        "final_psnr_vs_latent": final.psnr_vs_latent,
        "best_psnr_vs_latent": max(c.psnr_vs_latent for c in trace.checkpoints),
        "refreshes": [{"step": s, "mask_auc": a, "gmm": f.to_json()} for s, a, f in trace.refreshes],
        "gmm_input": "min-max normalised per-pixel squared error",
        "config": config.to_json(),
    }
    if extra_summary:
        summary.update(extra_summary)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary
