"""Model files: a versioned JSON document.

Schema (version 1)::

    {
      "format": "freewaytt.ensemble",
      "version": 1,
      "kind": "xgb",                      # dt | bagging | rf | adaboost | gb | xgb
      "n_features": 5,
      "feature_names": ["TT_i-1", ...],
      "base_score": 61.2,
      "learning_rate": 0.1,
      "tree_weights": [1.0, ...],         # one per tree
      "hyperparams": {"t": 40, "L": 0.1, "d": 6, ...},
      "rng_seed": 7,                      # or null
      "trees": [node, ...]
    }

    node = {"leaf": score}
         | {"feature": j, "threshold": x, "gain": g, "value": v, "left": node, "right": node}

Rows with ``x[feature] <= threshold`` go left. Floats are written with
``repr`` precision, so a save/load round trip reproduces predictions exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CorruptModelError, ModelVersionError
from .ensembles import KINDS, Ensemble
from .tree import RegressionTree

FORMAT = "freewaytt.ensemble"
VERSION = 1


def _tree_to_node(tree: RegressionTree, i: int = 0) -> dict:
    if tree.feature[i] < 0:
        return {"leaf": float(tree.value[i])}
    return {"feature": int(tree.feature[i]), "threshold": float(tree.threshold[i]),
            "gain": float(tree.gain[i]), "value": float(tree.value[i]),
            "left": _tree_to_node(tree, int(tree.left[i])),
            "right": _tree_to_node(tree, int(tree.right[i]))}


def _node_to_tree(root: dict) -> RegressionTree:
    cols: dict[str, list] = {k: [] for k in ("feature", "threshold", "left", "right", "value", "gain")}

    def visit(node: dict) -> int:
        i = len(cols["feature"])
        for k in cols:
            cols[k].append(-1 if k in ("feature", "left", "right") else np.nan)
        if "leaf" in node:
            cols["value"][i] = float(node["leaf"])
            cols["gain"][i] = 0.0
            return i
        cols["feature"][i] = int(node["feature"])
        cols["threshold"][i] = float(node["threshold"])
        cols["gain"][i] = float(node["gain"])
        cols["value"][i] = float(node["value"])
        cols["left"][i] = visit(node["left"])
        cols["right"][i] = visit(node["right"])
        return i

    visit(root)
    ints = ("feature", "left", "right")
    return RegressionTree(**{k: np.array(v, dtype=np.int64 if k in ints else float) for k, v in cols.items()})


def model_to_dict(e: Ensemble) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": e.kind,
        "n_features": e.n_features,
        "feature_names": list(e.feature_names),
        "base_score": float(e.base_score),
        "learning_rate": float(e.learning_rate),
        "tree_weights": [float(w) for w in e.tree_weights],
        "hyperparams": e.hyperparams,
        "rng_seed": e.rng_seed,
        "trees": [_tree_to_node(t) for t in e.trees],
    }


def model_from_dict(doc: dict) -> Ensemble:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CorruptModelError("not a freewaytt model document")
    if doc.get("version") != VERSION:
        raise ModelVersionError(f"unsupported model version {doc.get('version')!r} (expected {VERSION})")
    try:
        kind = doc["kind"]
        if kind not in KINDS:
            raise CorruptModelError(f"unknown model kind {kind!r}")
        trees = [_node_to_tree(n) for n in doc["trees"]]
        weights = np.array(doc["tree_weights"], dtype=float)
        if len(weights) != len(trees):
            raise CorruptModelError("tree_weights length does not match tree count")
        return Ensemble(kind, trees, weights, float(doc["learning_rate"]), float(doc["base_score"]),
                        dict(doc["hyperparams"]), int(doc["n_features"]), doc.get("rng_seed"),
                        list(doc.get("feature_names", [])))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModelError(f"malformed model document: {exc!r}") from None


def dumps_model(e: Ensemble) -> str:
    return json.dumps(model_to_dict(e), separators=(",", ":"), allow_nan=False) + "\n"


def save_model(e: Ensemble, path: str | Path) -> None:
    Path(path).write_text(dumps_model(e))


def load_model(path: str | Path) -> Ensemble:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptModelError(f"{path}: corrupt model file ({exc})") from None
    return model_from_dict(doc)
