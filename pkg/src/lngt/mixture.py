"""Two-component 1D Gaussian mixture fitted by EM to per-sample losses.

The component with the smaller mean is taken to be the clean one: early in
training, correctly labelled samples (or static-scene pixels) have lower loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

VAR_FLOOR = 1e-6
MIN_VALUES = 10
LOG_2PI = math.log(2.0 * math.pi)


def normalize_losses(raw) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant input maps to 0.5 everywhere."""
    x = np.asarray(raw, dtype=np.float64).ravel()
    if x.size < 2:
        raise DataError("need at least two loss values to normalise")
    if not np.all(np.isfinite(x)):
        raise DataError("loss values must be finite")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


@dataclass(frozen=True)
class MixtureFit:
    means: tuple[float, float]
    variances: tuple[float, float]
    weights: tuple[float, float]
    loglik_trace: tuple[float, ...]
    clean_component: int
    iterations: int = 0
    converged: bool = False

    def component_log_density(self, x) -> np.ndarray:
        """``log(weight_k * N(x | mean_k, var_k))`` with shape ``(..., 2)``."""
        x = np.asarray(x, dtype=np.float64)[..., None]
        mu = np.asarray(self.means)
        var = np.asarray(self.variances)
        w = np.asarray(self.weights)
        return np.log(w) - 0.5 * (LOG_2PI + np.log(var) + (x - mu) ** 2 / var)

    def posteriors(self, x) -> np.ndarray:
        lp = self.component_log_density(x)
        lp -= lp.max(axis=-1, keepdims=True)
        e = np.exp(lp)
        return e / e.sum(axis=-1, keepdims=True)

    def to_json(self) -> dict:
        return {
            "means": list(self.means),
            "vars": list(self.variances),
            "weights": list(self.weights),
            "clean_component": self.clean_component,
            "loglik_trace": list(self.loglik_trace),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MixtureFit":
        return cls(tuple(doc["means"]), tuple(doc["vars"]), tuple(doc["weights"]),
                   tuple(doc["loglik_trace"]), int(doc["clean_component"]))


def fit_gmm(values, max_iters: int = 200, tol: float = 1e-6, seed: int = 0) -> MixtureFit:
    """EM for a two-Gaussian mixture.

    Means start at the 25th and 75th percentiles, both variances at the
    overall variance, weights at 1/2. Iteration stops once the total
    log-likelihood improves by less than ``tol`` or after ``max_iters`` M-steps. Initialisation is fully
    deterministic, so ``seed`` has no effect; it is accepted so callers can
    thread one seed through every stage.
    """
    del seed
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < MIN_VALUES:
        raise DataError(f"need at least {MIN_VALUES} values to fit a mixture, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DataError("mixture input must be finite")
    n = x.size
    mu = np.percentile(x, [25.0, 75.0])
    var = np.full(2, max(float(x.var()), VAR_FLOOR))
    w = np.array([0.5, 0.5])
    trace = []
    converged = False
    it = 0
    while True:
        # E-step; the log-sum-exp doubles as the log-likelihood of the current parameters
        lp = np.log(w) - 0.5 * (LOG_2PI + np.log(var) + (x[:, None] - mu) ** 2 / var)
        m = np.maximum(lp[:, 0], lp[:, 1])
        e = np.exp(lp - m[:, None])
        tot = e[:, 0] + e[:, 1]
        trace.append(float(np.sum(m + np.log(tot))))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            converged = True
            break
        if it == max_iters:
            break
        it += 1
        r = e / tot[:, None]
        nk = r.sum(axis=0)
        # a component that captured nothing keeps its previous parameters
        alive = nk > 1e-12
        new_mu = mu.copy()
        new_var = var.copy()
        new_mu[alive] = (r[:, alive] * x[:, None]).sum(axis=0) / nk[alive]
        new_var[alive] = (r[:, alive] * (x[:, None] - new_mu[alive]) ** 2).sum(axis=0) / nk[alive]
        mu = new_mu
        var = np.maximum(new_var, VAR_FLOOR)
        w = np.clip(nk / n, 1e-12, None)
        w /= w.sum()
    clean = int(np.argmin(mu)) if mu[0] != mu[1] else 0
    return MixtureFit(
        means=(float(mu[0]), float(mu[1])),
        variances=(float(var[0]), float(var[1])),
        weights=(float(w[0]), float(w[1])),
        loglik_trace=tuple(trace),
        clean_component=clean,
        iterations=it,
        converged=converged,
    )


def posterior_clean(fit: MixtureFit, value):
    """Posterior probability that ``value`` came from the clean component."""
    post = fit.posteriors(value)[..., fit.clean_component]
    return float(post) if np.ndim(post) == 0 else post


def monotone_posterior_clean(fit: MixtureFit, values) -> np.ndarray:
    """Clean posterior forced to be non-increasing in the value.

    With unequal variances the wider component wins both tails, so the raw
    posterior can call the very largest losses clean (or the very smallest
    noisy). Above the clean mean the weight is the running minimum of the
    posterior; below it, the running maximum taken from the mean downwards.
    Where the raw posterior is already monotone it is returned unchanged.
    """
    v = np.asarray(values, dtype=np.float64)
    flat = v.ravel()
    post = fit.posteriors(flat)[:, fit.clean_component]
    mu = fit.means[fit.clean_component]
    at_mu = float(fit.posteriors(mu)[fit.clean_component])
    order = np.argsort(flat, kind="stable")
    s = post[order]
    split = int(np.searchsorted(flat[order], mu, side="right"))
    out = np.empty_like(s)
    left = np.append(s[:split], at_mu)
    out[:split] = np.maximum.accumulate(left[::-1])[::-1][:-1]
    right = np.insert(s[split:], 0, at_mu)
    out[split:] = np.minimum.accumulate(right)[1:]
    res = np.empty_like(out)
    res[order] = out
    return res.reshape(v.shape)
