"""Robust classification losses on probability vectors.

Every family returns a value and the gradient with respect to the (clamped)
probability vector.  All functions broadcast over leading batch axes: ``p``
has shape ``(..., K)`` and ``y`` shape ``(...)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractError, ParameterError

P_FLOOR = 1e-12

FAMILIES = ("CE", "FL", "MAE", "RCE", "GCE", "TCE", "NCE", "APL")

DEFAULTS = {"gamma": 2.0, "A": -4.0, "rho": 0.7, "t": 2, "em_lambda": 0.0,
            "alpha": 1.0, "beta": 1.0}


@dataclass(frozen=True)
class LossSpec:
    """A loss family and its hyperparameters.

    ``em_lambda`` adds ``em_lambda * H(p)`` (prediction entropy) to any family.
    APL combines ``alpha * active + beta * passive``; neither part may itself
    be an APL.
    """

    family: str = "CE"
    gamma: float = DEFAULTS["gamma"]
    A: float = DEFAULTS["A"]
    rho: float = DEFAULTS["rho"]
    t: int = DEFAULTS["t"]
    em_lambda: float = DEFAULTS["em_lambda"]
    active: Optional["LossSpec"] = None
    passive: Optional["LossSpec"] = None
    alpha: float = DEFAULTS["alpha"]
    beta: float = DEFAULTS["beta"]

    def __post_init__(self):
        validate(self)

    def without_em(self) -> "LossSpec":
        return replace(self, em_lambda=0.0)

    def to_json(self) -> dict:
        out = {"family": self.family, "em_lambda": self.em_lambda}
        if self.family == "FL":
            out["gamma"] = self.gamma
        elif self.family == "RCE":
            out["A"] = self.A
        elif self.family == "GCE":
            out["rho"] = self.rho
        elif self.family == "TCE":
            out["t"] = self.t
        elif self.family == "APL":
            out.update(active=self.active.to_json(), passive=self.passive.to_json(),
                       alpha=self.alpha, beta=self.beta)
        return out

    @classmethod
    def from_json(cls, doc) -> "LossSpec":
        if isinstance(doc, str):
            doc = json.loads(doc)
        if not isinstance(doc, dict):
            raise ParameterError("loss spec must be a JSON object")
        allowed = {"family", "gamma", "A", "rho", "t", "em_lambda", "active",
                   "passive", "alpha", "beta"}
        unknown = set(doc) - allowed
        if unknown:
            raise ParameterError(f"unknown loss spec keys: {sorted(unknown)}")
        kw = dict(doc)
        kw["family"] = str(kw.get("family", "CE")).upper()
        for part in ("active", "passive"):
            if part in kw and kw[part] is not None:
                kw[part] = cls.from_json(kw[part])
        if "t" in kw:
            if float(kw["t"]) != int(kw["t"]):
                raise ParameterError("TCE order t must be an integer")
            kw["t"] = int(kw["t"])
        return cls(**kw)


def validate(spec: LossSpec, nested: bool = False) -> None:
    fam = spec.family
    if fam not in FAMILIES:
        raise ParameterError(f"unknown loss family {fam!r}")
    if not spec.em_lambda >= 0:
        raise ParameterError("em_lambda must be >= 0")
    if fam == "FL" and not spec.gamma >= 0:
        raise ParameterError("FL gamma must be >= 0")
    if fam == "RCE" and not spec.A < 0:
        raise ParameterError("RCE A must be negative")
    if fam == "GCE" and not 0 < spec.rho <= 1:
        raise ParameterError("GCE rho must lie in (0, 1]")
    if fam == "TCE" and (int(spec.t) != spec.t or spec.t < 1):
        raise ParameterError("TCE t must be a positive integer")
    if fam == "APL":
        if nested:
            raise ParameterError("APL cannot be nested inside APL")
        if spec.active is None or spec.passive is None:
            raise ParameterError("APL needs both active and passive parts")
        if not (spec.alpha > 0 and spec.beta > 0):
            raise ParameterError("APL weights alpha and beta must be positive")
        validate(spec.active, nested=True)
        validate(spec.passive, nested=True)


def clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), P_FLOOR, 1.0 - P_FLOOR)


def entropy(p):
    p = clamp(p)
    return -np.sum(p * np.log(p), axis=-1)


def entropy_grad(p):
    return -(np.log(clamp(p)) + 1.0)


def _pick(p, y):
    y = np.asarray(y, dtype=np.int64)
    return np.take_along_axis(p, y[..., None], axis=-1)[..., 0]


def _check_labels(p, y):
    y = np.asarray(y)
    K = p.shape[-1]
    if np.any(y < 0) or np.any(y >= K):
        raise ParameterError(f"label outside [0, {K})")
    if p.shape[:-1] != y.shape:
        raise ParameterError(f"p batch shape {p.shape[:-1]} does not match labels {y.shape}")


def _base(spec: LossSpec, p, y, want_grad: bool):
    """Value (and gradient wrt p) of one non-APL family without the EM term."""
    py = _pick(p, y)
    fam = spec.family
    coef = None  # d loss / d p_y for families that only see p_y
    extra = None
    if fam == "CE":
        val = -np.log(py)
        if want_grad:
            coef = -1.0 / py
    elif fam == "FL":
        g = spec.gamma
        q = 1.0 - py
        val = -q ** g * np.log(py)
        if want_grad:
            first = g * q ** (g - 1.0) * np.log(py) if g != 0 else 0.0
            coef = first - q ** g / py
    elif fam == "MAE":
        val = 2.0 * (1.0 - py)
        if want_grad:
            coef = np.full_like(py, -2.0)
    elif fam == "RCE":
        val = -spec.A * (1.0 - py)
        if want_grad:
            coef = np.full_like(py, spec.A)
    elif fam == "GCE":
        r = spec.rho
        val = (1.0 - py ** r) / r
        if want_grad:
            coef = -py ** (r - 1.0)
    elif fam == "TCE":
        q = 1.0 - py
        val = sum(q ** i / i for i in range(1, spec.t + 1))
        if want_grad:
            coef = -(1.0 - q ** spec.t) / py
    elif fam == "NCE":
        logp = np.log(p)
        total = logp.sum(axis=-1)
        logpy = np.log(py)
        val = logpy / total
        if want_grad:
            # every p_k enters through the denominator; p_y also through the numerator
            extra = (-logpy / total ** 2)[..., None] / p
            coef = 1.0 / (total * py)
    else:  # pragma: no cover - validate() rejects this
        raise ParameterError(fam)
    if not want_grad:
        return val, None
    grad = np.zeros_like(p) if extra is None else extra
    y = np.asarray(y, dtype=np.int64)
    np.put_along_axis(grad, y[..., None], _pick(grad, y)[..., None] + np.asarray(coef)[..., None], axis=-1)
    return val, grad


def _evaluate(spec: LossSpec, p, y, want_grad: bool):
    p = clamp(p)
    _check_labels(p, y)
    if spec.family == "APL":
        va, ga = _evaluate(spec.active, p, y, want_grad)
        vp, gp = _evaluate(spec.passive, p, y, want_grad)
        val = spec.alpha * va + spec.beta * vp
        grad = spec.alpha * ga + spec.beta * gp if want_grad else None
    else:
        val, grad = _base(spec, p, y, want_grad)
    if spec.em_lambda:
        val = val + spec.em_lambda * entropy(p)
        if want_grad:
            grad = grad + spec.em_lambda * entropy_grad(p)
    return val, grad


@dataclass(frozen=True)
class LossEval:
    value: np.ndarray
    grad_p: np.ndarray = field(repr=False)


def loss_value(spec: LossSpec, p, y):
    """Loss of prediction ``p`` against class ``y``; scalar for a single vector."""
    val, _ = _evaluate(spec, p, y, want_grad=False)
    return float(val) if np.ndim(val) == 0 else val


def loss_grad(spec: LossSpec, p, y) -> LossEval:
    val, grad = _evaluate(spec, p, y, want_grad=True)
    return LossEval(float(val) if np.ndim(val) == 0 else val, grad)


def table_coefficient(spec: LossSpec, p, y):
    """Coefficient of grad p_y in the published factored gradient.

    This ignores NCE's and the entropy term's dependence on the other
    classes, which :func:`loss_grad` does carry.
    """
    p = clamp(p)
    py = _pick(p, y)
    fam = spec.family
    if fam == "CE":
        return -1.0 / py
    if fam == "FL":
        g, q = spec.gamma, 1.0 - py
        first = g * q ** (g - 1.0) * np.log(py) if g != 0 else 0.0
        return first - q ** g / py
    if fam == "MAE":
        return -2.0 * np.ones_like(py)
    if fam == "RCE":
        return spec.A * np.ones_like(py)
    if fam == "GCE":
        return -1.0 / py ** (1.0 - spec.rho)
    if fam == "TCE":
        return -(1.0 - (1.0 - py) ** spec.t) / py
    if fam == "NCE":
        logp = np.log(p)
        q = logp.sum(axis=-1) - np.log(py)
        return q / logp.sum(axis=-1) ** 2 / py
    raise ContractError(f"no single published coefficient for {fam}")


def symmetry_constant(spec: LossSpec, p):
    """Sum of the loss over every possible target class."""
    p = clamp(p)
    K = p.shape[-1]
    total = 0.0
    for k in range(K):
        total = total + loss_value(spec, p, np.full(p.shape[:-1], k, dtype=np.int64))
    return total


def is_exactly_symmetric(spec: LossSpec) -> bool:
    if spec.em_lambda:
        return False
    fam = spec.family
    if fam in ("MAE", "RCE", "NCE"):
        return True
    if fam == "GCE":
        return spec.rho == 1
    if fam == "TCE":
        return spec.t == 1
    if fam == "APL":
        return is_exactly_symmetric(spec.active) and is_exactly_symmetric(spec.passive)
    return False


def symmetric_sum(spec: LossSpec, K: int) -> float:
    """Closed-form constant C for exactly symmetric losses."""
    if not is_exactly_symmetric(spec):
        raise ContractError(f"{spec.family} is not exactly symmetric")
    fam = spec.family
    if fam == "MAE":
        return 2.0 * K - 2.0
    if fam == "RCE":
        return -spec.A * K + spec.A
    if fam == "NCE":
        return 1.0
    if fam in ("GCE", "TCE"):
        return float(K - 1)
    return spec.alpha * symmetric_sum(spec.active, K) + spec.beta * symmetric_sum(spec.passive, K)


def symmetric_interval(spec: LossSpec, K: int) -> tuple[float, float]:
    """Published bounds on the class-sum for GCE and TCE."""
    if spec.family == "GCE":
        r = spec.rho
        return (K - K ** (1.0 - r)) / r, (K - 1) / r
    if spec.family == "TCE":
        return float(K - 1), (K - 1) * sum(1.0 / i for i in range(1, spec.t + 1))
    raise ContractError(f"no interval for {spec.family}")


def noise_tolerance_check(spec: LossSpec, probe_set, eta: float, K: int) -> dict:
    """Compare the exact noisy risk with its closed-form rewrite.

    ``probe_set`` is a list of ``(p, clean_class)`` pairs. ``lhs`` enumerates
    every flip outcome weighted by the symmetric transition row; ``rhs`` is
    ``(1 - eta K/(K-1)) R + eta C/(K-1)`` with ``R`` the clean-label mean.
    """
    if not is_exactly_symmetric(spec):
        raise ContractError(f"{spec.family} does not satisfy the symmetric condition")
    if not 0 <= eta < (K - 1) / K:
        raise ParameterError(f"eta must lie in [0, (K-1)/K) = [0, {(K - 1) / K})")
    if not probe_set:
        raise ParameterError("probe set is empty")
    C = symmetric_sum(spec, K)
    lhs = 0.0
    clean = 0.0
    for p, y in probe_set:
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (K,):
            raise ParameterError(f"probe has length {p.shape}, expected {K}")
        row = np.full(K, eta / (K - 1))
        row[y] = 1.0 - eta
        lhs += sum(row[j] * loss_value(spec, p, j) for j in range(K))
        clean += loss_value(spec, p, y)
    n = len(probe_set)
    lhs /= n
    r_clean = clean / n
    rhs = (1.0 - eta * K / (K - 1)) * r_clean + eta * C / (K - 1)
    return {"lhs": lhs, "rhs": rhs, "clean_risk": r_clean, "C": C}


def nce_log_sums(p, y):
    """``(P, Q)``: log p_y and the sum of the remaining log-probabilities."""
    p = clamp(p)
    logp = np.log(p)
    big_p = np.log(_pick(p, y))
    return big_p, logp.sum(axis=-1) - big_p


def nce_weight(p, y):
    """Magnitude ``-Q / (P + Q)^2`` of the NCE gradient attenuation factor."""
    big_p, big_q = nce_log_sums(p, y)
    w = -big_q / (big_p + big_q) ** 2
    return float(w) if np.ndim(w) == 0 else w


def random_interior_simplex(rng: np.random.Generator, K: int, n: int | None = None,
                            floor: float = 1e-3):
    """Dirichlet(1) draws kept at least ``floor`` away from 0."""
    shape = (K,) if n is None else (n, K)
    p = rng.dirichlet(np.ones(K), size=None if n is None else n)
    p = floor + (1.0 - K * floor) * p
    return p.reshape(shape)


CHECK_FAMILIES = {
    "CE": LossSpec("CE"),
    "FL": LossSpec("FL"),
    "MAE": LossSpec("MAE"),
    "RCE": LossSpec("RCE"),
    "GCE": LossSpec("GCE"),
    "TCE": LossSpec("TCE"),
    "NCE": LossSpec("NCE"),
    "APL": LossSpec("APL", active=LossSpec("NCE"), passive=LossSpec("MAE")),
    "CE+EM": LossSpec("CE", em_lambda=0.4),
}


def fd_rel_error(spec: LossSpec, p, y, h: float = 1e-6) -> float:
    """Relative error ``|a - n| / max(|a|, |n|)`` (Euclidean norms) between the
    analytic gradient and central differences."""
    p = np.asarray(p, dtype=np.float64)
    grad = loss_grad(spec, p, y).grad_p
    num = np.empty_like(p)
    for k in range(p.size):
        e = np.zeros_like(p)
        e[k] = h
        num[k] = (loss_value(spec, p + e, y) - loss_value(spec, p - e, y)) / (2 * h)
    scale = max(np.linalg.norm(grad), np.linalg.norm(num), 1e-300)
    return float(np.linalg.norm(grad - num) / scale)


def verification_report(seed: int = 0, n_points: int = 100,
                        Ks=(2, 10, 100), etas=None) -> dict:
    """Gradient, symmetry and noise-tolerance battery for every family."""
    from . import _rng  # local: keep module import light

    rng = _rng.make_rng(seed, 40)
    report: dict = {"gradient": {}, "symmetry": {}, "interval": {}, "identity": {},
                    "reductions": {}, "failures": []}

    for name, spec in CHECK_FAMILIES.items():
        worst = 0.0
        for _ in range(n_points):
            K = int(rng.integers(2, 11))
            p = random_interior_simplex(rng, K, floor=1e-2)
            y = int(rng.integers(K))
            worst = max(worst, fd_rel_error(spec, p, y))
        report["gradient"][name] = worst
        if not worst < 1e-5:
            report["failures"].append(f"gradient:{name}")

    sym_specs = {"MAE": LossSpec("MAE"), "RCE": LossSpec("RCE", A=-4.0), "NCE": LossSpec("NCE")}
    for name, spec in sym_specs.items():
        report["symmetry"][name] = {}
        for K in Ks:
            ps = random_interior_simplex(rng, K, 50)
            sums = symmetry_constant(spec, ps)
            C = symmetric_sum(spec, K)
            dev = float(np.max(np.abs(sums - C)))
            report["symmetry"][name][str(K)] = {"constant": C, "max_dev": dev}
            if not dev < 1e-9:
                report["failures"].append(f"symmetry:{name}:K={K}")

    for name, spec in {"GCE": LossSpec("GCE"), "TCE": LossSpec("TCE")}.items():
        report["interval"][name] = {}
        for K in Ks:
            lo, hi = symmetric_interval(spec, K)
            sums = symmetry_constant(spec, random_interior_simplex(rng, K, 50))
            ok = bool(np.all(sums >= lo - 1e-9) and np.all(sums <= hi + 1e-9))
            report["interval"][name][str(K)] = {"low": lo, "high": hi,
                                              "min": float(sums.min()), "max": float(sums.max()),
                                              "contained": ok}
            if not ok:
                report["failures"].append(f"interval:{name}:K={K}")

    exact = {"MAE": LossSpec("MAE"), "RCE": LossSpec("RCE"), "NCE": LossSpec("NCE"),
             "GCE(rho=1)": LossSpec("GCE", rho=1.0), "TCE(t=1)": LossSpec("TCE", t=1),
             "APL(NCE+MAE)": CHECK_FAMILIES["APL"]}
    for name, spec in exact.items():
        worst = 0.0
        for K in (2, 4, 10):
            for eta in (etas or (0.1, 0.4, 0.8 * (K - 1) / K)):
                if not eta < (K - 1) / K:
                    continue
                probes = [(random_interior_simplex(rng, K), int(rng.integers(K))) for _ in range(5)]
                res = noise_tolerance_check(spec, probes, eta, K)
                worst = max(worst, abs(res["lhs"] - res["rhs"]))
        report["identity"][name] = worst
        if not worst < 1e-9:
            report["failures"].append(f"identity:{name}")

    ps = random_interior_simplex(rng, 10, 200)
    ys = rng.integers(0, 10, 200)
    red = {
        "FL(gamma=0)-CE": np.max(np.abs(loss_value(LossSpec("FL", gamma=0.0), ps, ys)
                                        - loss_value(LossSpec("CE"), ps, ys))),
        "GCE(rho=1)-MAE/2": np.max(np.abs(loss_value(LossSpec("GCE", rho=1.0), ps, ys)
                                          - loss_value(LossSpec("MAE"), ps, ys) / 2)),
        "TCE(t=1)-MAE/2": np.max(np.abs(loss_value(LossSpec("TCE", t=1), ps, ys)
                                        - loss_value(LossSpec("MAE"), ps, ys) / 2)),
        "GCE(rho=1e-8)-CE": np.max(np.abs(loss_value(LossSpec("GCE", rho=1e-8), ps, ys)
                                          - loss_value(LossSpec("CE"), ps, ys))),
    }
    tols = {"FL(gamma=0)-CE": 0.0, "GCE(rho=1)-MAE/2": 0.0, "TCE(t=1)-MAE/2": 0.0,
            "GCE(rho=1e-8)-CE": 1e-6}
    for name, dev in red.items():
        report["reductions"][name] = float(dev)
        if not dev <= tols[name]:
            report["failures"].append(f"reduction:{name}")

    report["passed"] = not report["failures"]
    return report
