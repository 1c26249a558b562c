"""Desk-scale benchmark: a synthetic census-like dataset and a trained six-layer MLP.

Training happens here, in the test harness, with scikit-learn; the toolkit
itself only loads models.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from zofair.model import LayerSpec, MlpModel, save_model
from zofair.schema import AttributeSpec, DatasetSchema, save_schema, write_instances

HIDDEN = (50, 30, 15, 10, 5)

ATTRIBUTES = [
    AttributeSpec("age", 1, 9),
    AttributeSpec("workclass", 0, 7),
    AttributeSpec("education", 0, 15),
    AttributeSpec("marital", 0, 6),
    AttributeSpec("occupation", 0, 13),
    AttributeSpec("relationship", 0, 5),
    AttributeSpec("race", 0, 4),
    AttributeSpec("gender", 0, 1, protected=True),
    AttributeSpec("capital", 0, 19),
    AttributeSpec("hours", 1, 10),
    AttributeSpec("country", 0, 9),
    AttributeSpec("tenure", 0, 11),
]

SCHEMA = DatasetSchema(ATTRIBUTES)


def make_data(n: int = 1000, seed: int = 7):
    rng = np.random.default_rng(seed)
    cols = [rng.integers(a.min, a.max + 1, size=n) for a in ATTRIBUTES]
    X = np.stack(cols, axis=1).astype(np.int64)
    age, wc, edu, mar, occ, rel, race, gen, cap, hrs, ctry, ten = X.T
    logit = (0.35 * (edu - 7.5) + 0.45 * (age - 5) + 0.25 * (hrs - 5.5)
             + 0.15 * (cap - 9.5) + 0.6 * (mar == 2) - 0.3 * (occ % 3 == 0)
             + 0.1 * (ten - 5.5) + 1.1 * (gen - 0.5)
             + 0.4 * np.sin(ctry) - 0.15 * (rel - 2.5))
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-1.3 * logit))).astype(np.int64)
    return X, y


def train_model(X, y, seed: int = 0) -> MlpModel:
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.neural_network import MLPClassifier

    clf = MLPClassifier(hidden_layer_sizes=HIDDEN, activation="relu", solver="adam",
                        alpha=1e-2, learning_rate_init=3e-3, max_iter=300, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(X.astype(np.float64), y)
    layers = []
    for i, (w, b) in enumerate(zip(clf.coefs_, clf.intercepts_)):
        act = "sigmoid" if i == len(clf.coefs_) - 1 else "relu"
        layers.append(LayerSpec(w.T, b, act))
    model = MlpModel(layers, X.shape[1])
    # sklearn and our forward must agree on the trained network
    ref = clf.predict_proba(X[:50].astype(np.float64))[:, 1]
    assert np.allclose(model.forward(X[:50]), ref, atol=1e-9)
    return model


def build(out_dir, n: int = 1000, seed: int = 7, precision: str = "float32",
          global_num: int = 100, local_num: int = 100, **overrides) -> Path:
    """Write schema, dataset, model and an experiment config; return the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    X, y = make_data(n, seed)
    model = train_model(X, y)
    save_model(model, out / "model.json")
    save_schema(SCHEMA, out / "schema.json")
    write_instances(out / "data.csv", X, SCHEMA)
    config = {
        "model": "model.json",
        "schema": "schema.json",
        "dataset": "data.csv",
        "precision": precision,
        "global": {"global_num": global_num},
        "local": {"local_num": local_num},
        "rounds": 1,
        "rng_seed": 0,
        "output_dir": "out",
    }
    for key, val in overrides.items():
        config[key] = val
    path = out / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path
