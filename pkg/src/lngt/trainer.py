"""Softmax MLP classifier trained with plain SGD under noisy labels.

Regimes
-------
vanilla       cross-entropy on the observed labels
ce_em         cross-entropy plus ``em_lambda`` times prediction entropy
bootstrap     cross-entropy against ``beta * onehot + (1 - beta) * p``
m_correction  bootstrap with a per-sample beta: the GMM posterior of being clean
small_loss    only the ``select_fraction`` lowest-loss samples of each batch update
custom_loss   any :class:`~lngt.losses.LossSpec`

Every regime can additionally be combined with mixup (``mixup_alpha > 0``).

Soft-target losses come in two flavours selected by ``target_grad``. With
``"full"`` the prediction inside the target stays on the gradient path, so
the loss is optimised as ``w * CE + (1 - w) * H(p)``, the same expression
expanded. With ``"detached"`` the target is a constant for the step, which
for a scalar ``w`` amounts to plain cross-entropy scaled by ``w``.

Oracle clean labels are read only by the instrumentation that produces
:class:`EpochMetrics`; nothing on the optimisation path touches them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import _rng
from .datagen import ClassificationDataset
from .errors import ParameterError
from .losses import LossSpec, clamp, entropy, entropy_grad, loss_grad, loss_value
from .mixture import MixtureFit, fit_gmm, monotone_posterior_clean, normalize_losses
from .nn import MlpModel, Sgd

REGIMES = ("vanilla", "ce_em", "bootstrap", "m_correction", "small_loss", "custom_loss")
CE = LossSpec("CE")


@dataclass
class TrainConfig:
    regime: str = "vanilla"
    loss: LossSpec = field(default_factory=lambda: LossSpec("CE"))
    em_lambda: float = 0.4
    beta: float = 0.8
    mixup_alpha: float = 0.0
    select_fraction: float = 0.6
    warmup_epochs: int = 5
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.1
    seed: int = 0
    hidden: tuple = (32, 32)
    activation: str = "relu"
    target_grad: str = "full"
    small_loss_warmup: bool = True
    hist_bins: int = 20
    tracked_per_subset: int = 3

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSpec.from_json(self.loss)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ParameterError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ParameterError("beta must lie in [0, 1]")
        if not self.mixup_alpha >= 0:
            raise ParameterError("mixup_alpha must be >= 0")
        if not 0.0 < self.select_fraction <= 1.0:
            raise ParameterError("select_fraction must lie in (0, 1]")
        if not self.em_lambda >= 0:
            raise ParameterError("em_lambda must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ParameterError("epochs and batch_size must be positive, warmup_epochs >= 0")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.target_grad not in ("full", "detached"):
            raise ParameterError("target_grad must be 'full' or 'detached'")
        if self.hist_bins < 1 or self.tracked_per_subset < 0:
            raise ParameterError("hist_bins must be positive and tracked_per_subset >= 0")
        if self.activation not in ("relu", "tanh"):
            raise ParameterError("activation must be relu or tanh")

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_json()
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss_all: float
    train_loss_clean_subset: Optional[float]
    train_loss_mislabeled_subset: Optional[float]
    train_acc_on_noisy_labels: float
    test_acc_on_clean_labels: float
    loss_histogram: tuple  # (bin_edges, clean_counts, mislabeled_counts)
    gmm: Optional[MixtureFit]
    tracked_probs: list  # (sample_id, p_on_noisy, p_on_clean)
    identity_residual: float = 0.0


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, grad_p):
    """Chain ``dL/dp`` through the softmax Jacobian to ``dL/dz``."""
    return p * (grad_p - np.sum(grad_p * p, axis=-1, keepdims=True))


def init_model(d: int, K: int, hidden=(32, 32), activation: str = "relu", seed: int = 0) -> MlpModel:
    return MlpModel([d, *hidden, K], activation, rng=_rng.make_rng(seed, _rng.STREAM_INIT))


def forward(model: MlpModel, features):
    logits = model.forward(features)
    return logits, softmax(logits)


def backward(model: MlpModel, features, grad_p) -> list[np.ndarray]:
    """Exact parameter gradients of ``sum_i grad_p[i] . p_i``.

    For a single sample this is the gradient of any loss whose derivative
    with respect to the probability vector is ``grad_p``.
    """
    features = np.asarray(features, dtype=np.float64)
    logits, cache = model.forward(features, keep_cache=True)
    p = softmax(logits)
    grad_p = np.asarray(grad_p, dtype=np.float64)
    if grad_p.shape != p.shape:
        raise ParameterError(f"grad_p has shape {grad_p.shape}, expected {p.shape}")
    return model.backward(cache, softmax_backward(p, grad_p))


def regime_bootstrap_target(noisy_onehot, p, beta):
    """Soft target ``beta * noisy + (1 - beta) * p``; ``beta`` may be per-sample."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0) or np.any(beta > 1):
        raise ParameterError("beta must lie in [0, 1]")
    noisy_onehot = np.asarray(noisy_onehot, dtype=np.float64)
    if beta.ndim:
        beta = beta[..., None]
    return beta * noisy_onehot + (1.0 - beta) * np.asarray(p, dtype=np.float64)


def regime_m_correction_weights(epoch_losses) -> tuple[np.ndarray, MixtureFit]:
    """Per-sample clean posteriors from a GMM on min-max normalised losses.

    The posterior is made non-increasing in the loss so that confidently
    wrong samples are never trusted more than moderately wrong ones.
    """
    norm = normalize_losses(epoch_losses)
    fit = fit_gmm(norm)
    return np.clip(monotone_posterior_clean(fit, norm), 0.0, 1.0), fit


def regime_small_loss_select(batch_losses, select_fraction: float) -> np.ndarray:
    """Indices of the ``ceil(fraction * B)`` smallest losses, ties to the lower index."""
    if not 0.0 < select_fraction <= 1.0:
        raise ParameterError("select_fraction must lie in (0, 1]")
    losses = np.asarray(batch_losses, dtype=np.float64)
    n = min(losses.size, math.ceil(select_fraction * losses.size - 1e-9))
    order = np.argsort(losses, kind="stable")
    return np.sort(order[:n])


@dataclass
class MixedBatch:
    features: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    partner: np.ndarray
    lam: float

    def soft_labels(self, K: int) -> np.ndarray:
        out = self.lam * np.eye(K)[self.labels_a]
        return out + (1.0 - self.lam) * np.eye(K)[self.labels_b]


def mix(x_a, x_b, lam: float):
    return lam * np.asarray(x_a, dtype=np.float64) + (1.0 - lam) * np.asarray(x_b, dtype=np.float64)


def regime_mixup(features, labels, alpha: float, rng: np.random.Generator) -> MixedBatch:
    """Pair every sample with a random batch partner and blend with one Beta(alpha, alpha) draw."""
    if not alpha >= 0:
        raise ParameterError("mixup alpha must be >= 0")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if alpha == 0:
        return MixedBatch(features, labels, labels, np.arange(n), 1.0)
    lam = float(rng.beta(alpha, alpha))
    partner = rng.permutation(n)
    return MixedBatch(mix(features, features[partner], lam), labels, labels[partner], partner, lam)


def _sample_losses(config: TrainConfig, p, y, w, p_target=None):
    """Per-sample value and ``dL/dp`` of the regime's effective loss.

    ``w`` is the (possibly per-sample) label-trust weight for the soft-target
    regimes and ignored elsewhere.
    """
    regime = config.regime
    if p_target is None:
        p_target = p
    if regime in ("vanilla", "small_loss"):
        ev = loss_grad(CE, p, y)
        return ev.value, ev.grad_p
    if regime == "ce_em":
        ev = loss_grad(LossSpec("CE", em_lambda=config.em_lambda), p, y)
        return ev.value, ev.grad_p
    if regime == "custom_loss":
        ev = loss_grad(config.loss, p, y)
        return ev.value, ev.grad_p
    # bootstrap / m_correction: -(w*onehot + (1-w)*p)^T log p
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), y.shape)
    ev = loss_grad(CE, p, y)
    if config.target_grad == "full":
        value = w * ev.value + (1.0 - w) * entropy(p)
        grad = w[:, None] * ev.grad_p + (1.0 - w)[:, None] * entropy_grad(p)
        return value, grad
    target = regime_bootstrap_target(np.eye(p.shape[-1])[y], p_target, w)
    pc = clamp(p)
    return -np.sum(target * np.log(pc), axis=-1), -target / pc


def effective_loss(config: TrainConfig, p, batch: MixedBatch, w_a, w_b, p_target=None):
    """Per-sample effective losses of a (possibly mixed) batch and ``dL/dp`` of their mean.

    ``p_target`` is the prediction placed inside bootstrap targets when
    ``target_grad == "detached"``; it is treated as a constant.
    """
    v_a, g_a = _sample_losses(config, p, batch.labels_a, w_a, p_target)
    if batch.lam == 1.0:
        values, grads = v_a, g_a
    else:
        t_b = None if p_target is None else np.asarray(p_target)[batch.partner]
        v_b, g_b = _sample_losses(config, p, batch.labels_b, w_b, t_b)
        values = batch.lam * v_a + (1.0 - batch.lam) * v_b
        grads = batch.lam * g_a + (1.0 - batch.lam) * g_b
    keep = np.arange(len(values))
    if config.regime == "small_loss":
        keep = regime_small_loss_select(values, config.select_fraction)
    mask = np.zeros(len(values))
    mask[keep] = 1.0 / len(keep)
    return values, grads * mask[:, None], keep


def risk_decomposition(model: MlpModel, dataset: ClassificationDataset, loss: LossSpec = CE) -> dict:
    """Mean loss on all samples and on the oracle clean / mislabelled subsets."""
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    _, p = forward(model, dataset.features)
    return decompose(loss_value(loss, p, dataset.noisy_labels), dataset.mislabeled)


def decompose(per_sample, mislabeled) -> dict:
    per_sample = np.asarray(per_sample, dtype=np.float64)
    mislabeled = np.asarray(mislabeled, dtype=bool)
    n = per_sample.size
    r_all = float(per_sample.mean())
    n_m = int(mislabeled.sum())
    n_c = n - n_m
    r_clean = float(per_sample[~mislabeled].mean()) if n_c else None
    r_mis = float(per_sample[mislabeled].mean()) if n_m else None
    recon = (n_c / n) * (r_clean or 0.0) + (n_m / n) * (r_mis or 0.0)
    return {"r_all": r_all, "r_clean": r_clean, "r_mislabeled": r_mis,
            "identity_residual": abs(r_all - recon)}


def _tracked_ids(dataset: ClassificationDataset, per_subset: int) -> np.ndarray:
    mis = np.flatnonzero(dataset.mislabeled)[:per_subset]
    clean = np.flatnonzero(~dataset.mislabeled)[:per_subset]
    return np.sort(np.concatenate([mis, clean]))


def _measure(model, train: ClassificationDataset, test: ClassificationDataset,
             config: TrainConfig, epoch: int, tracked) -> tuple[EpochMetrics, np.ndarray]:
    _, p = forward(model, train.features)
    ce = loss_value(CE, p, train.noisy_labels)
    dec = decompose(ce, train.mislabeled)
    norm = normalize_losses(ce)
    edges = np.linspace(0.0, 1.0, config.hist_bins + 1)
    mis = train.mislabeled
    clean_counts, _ = np.histogram(norm[~mis], bins=edges)
    mis_counts, _ = np.histogram(norm[mis], bins=edges)
    gmm = fit_gmm(norm) if len(train) >= 10 else None
    _, p_test = forward(model, test.features)
    track = [(int(i), float(p[i, train.noisy_labels[i]]), float(p[i, train.clean_labels[i]]))
             for i in tracked]
    m = EpochMetrics(
        epoch=epoch,
        train_loss_all=dec["r_all"],
        train_loss_clean_subset=dec["r_clean"],
        train_loss_mislabeled_subset=dec["r_mislabeled"],
        train_acc_on_noisy_labels=float(np.mean(p.argmax(axis=1) == train.noisy_labels)),
        test_acc_on_clean_labels=float(np.mean(p_test.argmax(axis=1) == test.clean_labels)),
        loss_histogram=(edges, clean_counts, mis_counts),
        gmm=gmm,
        tracked_probs=track,
        identity_residual=dec["identity_residual"],
    )
    return m, ce


def train(dataset: ClassificationDataset, test: ClassificationDataset,
          config: TrainConfig) -> tuple[MlpModel, list[EpochMetrics]]:
    """Run one regime; metrics are recorded at initialisation and after every epoch."""
    config.validate()
    if dataset.num_classes != test.num_classes or dataset.feature_dim != test.feature_dim:
        raise ParameterError("train and test sets must share K and feature dimension")
    K = dataset.num_classes
    model = init_model(dataset.feature_dim, K, config.hidden, config.activation, config.seed)
    opt = Sgd(config.learning_rate)
    shuffle_rng = _rng.make_rng(config.seed, _rng.STREAM_SHUFFLE)
    mix_rng = _rng.make_rng(config.seed, _rng.STREAM_MIXUP)
    x = dataset.features
    y = dataset.noisy_labels
    n = len(dataset)
    tracked = _tracked_ids(dataset, config.tracked_per_subset)
    vanilla_config = replace(config, regime="vanilla")

    history = []
    metrics, epoch_ce = _measure(model, dataset, test, config, 0, tracked)
    history.append(metrics)
    for epoch in range(1, config.epochs + 1):
        if config.regime == "m_correction" and epoch > config.warmup_epochs:
            weights, _ = regime_m_correction_weights(epoch_ce)
        elif config.regime == "bootstrap":
            weights = np.full(n, config.beta)
        else:
            weights = np.ones(n)
        step_config = config
        if config.regime == "small_loss" and config.small_loss_warmup and epoch <= config.warmup_epochs:
            step_config = vanilla_config
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = regime_mixup(x[idx], y[idx], config.mixup_alpha, mix_rng)
            logits, cache = model.forward(batch.features, keep_cache=True)
            p = softmax(logits)
            w = weights[idx]
            p_target = p
            if config.target_grad == "detached" and batch.lam != 1.0:
                p_target = softmax(model.forward(x[idx]))
            _, grad_p, _ = effective_loss(step_config, p, batch, w, w[batch.partner], p_target)
            grads = model.backward(cache, softmax_backward(p, grad_p))
            opt.step(model, grads)
        metrics, epoch_ce = _measure(model, dataset, test, config, epoch, tracked)
        history.append(metrics)
    return model, history


def best_epoch(history: list[EpochMetrics]) -> EpochMetrics:
    """Earliest epoch with the highest clean test accuracy."""
    return max(history, key=lambda m: (m.test_acc_on_clean_labels, -m.epoch))


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_outputs(history: list[EpochMetrics], config: TrainConfig, out_dir,
                  extra_summary: dict | None = None) -> dict:
    """metrics.csv, histograms/epoch_<n>.csv, tracked.csv, gmm.json and summary.json."""
    out = Path(out_dir)
    (out / "histograms").mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "r_all", "r_clean", "r_mislabeled", "train_acc_noisy", "test_acc_clean"])
        for m in history:
            wr.writerow([m.epoch, _fmt(m.train_loss_all), _fmt(m.train_loss_clean_subset),
                         _fmt(m.train_loss_mislabeled_subset), _fmt(m.train_acc_on_noisy_labels),
                         _fmt(m.test_acc_on_clean_labels)])
    for m in history:
        edges, cc, mc = m.loss_histogram
        with open(out / "histograms" / f"epoch_{m.epoch}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["bin_left", "bin_right", "clean_count", "mislabeled_count"])
            for i in range(len(cc)):
                wr.writerow([_fmt(edges[i]), _fmt(edges[i + 1]), int(cc[i]), int(mc[i])])
    with open(out / "tracked.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "sample_id", "p_on_noisy", "p_on_clean"])
        for m in history:
            for sid, pn, pc in m.tracked_probs:
                wr.writerow([m.epoch, sid, _fmt(pn), _fmt(pc)])
    gmms = {"normalized_losses": True,
            "epochs": [{"epoch": m.epoch, **m.gmm.to_json()} for m in history if m.gmm is not None]}
    (out / "gmm.json").write_text(json.dumps(gmms, sort_keys=True) + "\n")
    best = best_epoch(history)
    final = history[-1]
    summary = {
        "best_epoch": best.epoch,
        "best_test_acc_clean": best.test_acc_on_clean_labels,
        "final_test_acc_clean": final.test_acc_on_clean_labels,
        "final_train_acc_noisy": final.train_acc_on_noisy_labels,
        "max_identity_residual": max(m.identity_residual for m in history),
        "config": config.to_json(),
    }
    if extra_summary:
        summary.update(extra_summary)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary
