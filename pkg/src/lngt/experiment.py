"""One JSON document describing a whole experiment, and the code that runs it.

A classifier experiment::

    {"kind": "classifier",
     "seed": 0,
     "output_dir": "runs/vanilla_0",
     "dataset": {"generator": "rings", "per_class": 400, "noise_std": 0.05,
                 "nuisance_dims": 32, "nuisance_std": 0.05, "test_per_class": 500},
     "noise": {"kind": "symmetric", "eta": 0.4},
     "train": {"regime": "vanilla", "epochs": 300}}

A field experiment replaces ``dataset``/``noise``/``train`` with
``scene`` and ``field``. The top-level ``seed`` drives data generation, label
noise, view generation and model initialisation; the test set uses
``seed + test_seed_offset``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import datagen, field2d, noise, trainer
from .errors import ParameterError

KINDS = ("classifier", "field")

DATASET_KEYS = {
    "blobs": {"generator", "num_classes", "per_class", "feature_dim", "spread",
              "test_per_class", "test_seed_offset"},
    "rings": {"generator", "per_class", "noise_std", "nuisance_dims", "nuisance_std",
              "test_per_class", "test_seed_offset"},
}
NOISE_KEYS = {"kind", "eta", "pairs"}
SCENE_KEYS = {"pattern", "width", "height", "num_views", "distractor_fraction", "patch_size_range"}
TOP_KEYS = {
    "classifier": {"kind", "seed", "output_dir", "dataset", "noise", "train"},
    "field": {"kind", "seed", "output_dir", "scene", "field"},
}


def _reject_unknown(doc: dict, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise ParameterError(f"{where} must be a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise ParameterError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 0
    output_dir: str = "out"
    dataset: dict = field(default_factory=dict)
    noise: dict = field(default_factory=lambda: {"kind": "symmetric", "eta": 0.0})
    train: dict = field(default_factory=dict)
    scene: dict = field(default_factory=dict)
    field: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, doc) -> "ExperimentConfig":
        """Validate every section before anything runs."""
        if isinstance(doc, (str, Path)) and Path(doc).exists():
            doc = json.loads(Path(doc).read_text())
        _reject_unknown(doc, set().union(*TOP_KEYS.values()), "experiment config")
        kind = doc.get("kind")
        if kind not in KINDS:
            raise ParameterError(f"experiment kind must be one of {KINDS}")
        _reject_unknown(doc, TOP_KEYS[kind], f"{kind} experiment config")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ParameterError("seed must be a non-negative integer")
        cfg = cls(kind=kind, seed=seed, output_dir=str(doc.get("output_dir", "out")))
        if kind == "classifier":
            ds = dict(doc.get("dataset", {"generator": "rings"}))
            gen = ds.get("generator", "rings")
            if gen not in DATASET_KEYS:
                raise ParameterError(f"dataset generator must be one of {sorted(DATASET_KEYS)}")
            _reject_unknown(ds, DATASET_KEYS[gen], "dataset")
            ns = dict(doc.get("noise", {"kind": "symmetric", "eta": 0.0}))
            _reject_unknown(ns, NOISE_KEYS, "noise")
            cfg.dataset, cfg.noise = ds, ns
            cfg.train = dict(doc.get("train", {}))
            cfg.train_config()  # validates
        else:
            scene = dict(doc.get("scene", {}))
            _reject_unknown(scene, SCENE_KEYS, "scene")
            cfg.scene = scene
            cfg.field = dict(doc.get("field", {}))
            cfg.field_config()
        return cfg

    def to_json(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed, "output_dir": self.output_dir}
        if self.kind == "classifier":
            out.update(dataset=self.dataset, noise=self.noise, train=self.train)
        else:
            out.update(scene=self.scene, field=self.field)
        return out

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig.from_json({**self.train, "seed": self.seed})

    def field_config(self) -> field2d.FieldConfig:
        return field2d.FieldConfig.from_json({**self.field, "seed": self.seed})


def make_datasets(cfg: ExperimentConfig):
    """(noisy train set, clean test set, transition matrix)."""
    ds = dict(cfg.dataset)
    gen = ds.pop("generator", "rings")
    test_n = ds.pop("test_per_class", None)
    offset = ds.pop("test_seed_offset", 1000)
    make = datagen.make_blobs if gen == "blobs" else datagen.make_rings
    train_set = make(seed=cfg.seed, **ds)
    ds["per_class"] = test_n or ds.get("per_class", 100)
    test_set = make(seed=cfg.seed + offset, **ds)
    Q = make_matrix(cfg.noise, train_set.num_classes)
    return noise.apply_label_noise(train_set, Q, cfg.seed), test_set, Q


def make_matrix(spec: dict, K: int) -> noise.TransitionMatrix:
    kind = spec.get("kind", "symmetric")
    eta = float(spec.get("eta", 0.0))
    if kind == "symmetric":
        return noise.build_symmetric(K, eta)
    if kind == "asymmetric":
        pairs = spec.get("pairs")
        if pairs is None:
            pairs = [(i + 1) % K for i in range(K)]
        return noise.build_asymmetric(K, eta, pairs)
    raise ParameterError(f"noise kind must be symmetric or asymmetric, got {kind!r}")


def make_scene(cfg: ExperimentConfig) -> noise.ViewSet:
    s = cfg.scene
    latent = datagen.make_latent_image(s.get("pattern", "checker"), s.get("width", 64),
                                       s.get("height", 64), seed=cfg.seed)
    return noise.make_views(latent, s.get("num_views", 8), s.get("distractor_fraction", 0.2),
                            tuple(s.get("patch_size_range", (4, 12))), seed=cfg.seed)


def run_classifier(cfg: ExperimentConfig, write: bool = True):
    """Train one regime; returns (history, summary)."""
    tr, te, Q = make_datasets(cfg)
    tc = cfg.train_config()
    _, history = trainer.train(tr, te, tc)
    summary = None
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "matrix.json").write_text(json.dumps(Q.to_json(), sort_keys=True) + "\n")
        extra = {"experiment": cfg.to_json(), "flip_fraction": float(tr.mislabeled.mean())}
        summary = trainer.write_outputs(history, tc, out, extra)
    return history, summary


def run_field(cfg: ExperimentConfig, write: bool = True):
    """Fit one field regime; returns (trace, summary)."""
    vs = make_scene(cfg)
    fc = cfg.field_config()
    _, trace = field2d.fit_field(vs, fc)
    summary = None
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = field2d.write_outputs(trace, fc, out, {"experiment": cfg.to_json()})
    return trace, summary


def run(cfg: ExperimentConfig, write: bool = True):
    return run_classifier(cfg, write) if cfg.kind == "classifier" else run_field(cfg, write)
