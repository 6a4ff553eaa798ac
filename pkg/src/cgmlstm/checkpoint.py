"""Self-describing JSON checkpoints for :class:`~cgmlstm.network.Model`.

Parameter arrays are written row-major with 17 significant digits, which
round-trips every double exactly.  Each checkpoint may name the SHA-256 of
the checkpoint it was trained from, so a fine-tuned model can be traced back
through both pre-training rounds to its initialisation seed.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .network import DENSE_WIDTHS, LSTM_UNITS, DenseParams, LstmParams, Model
from .pipeline import Scaler

FORMAT_VERSION = 1


def layer_spec() -> dict:
    return {
        "lstm_units": LSTM_UNITS,
        "bilstm_units": LSTM_UNITS,
        "input_features": 1,
        "dense_widths": [w for w, _ in DENSE_WIDTHS],
        "dense_activations": [a for _, a in DENSE_WIDTHS],
    }


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt_array(a: np.ndarray) -> str:
    return "[" + ", ".join(format(float(x), ".17g") for x in a.ravel()) + "]"


def dumps_model(m: Model, parent_hash: Optional[str] = None) -> str:
    params = m.named_parameters()
    doc = {
        "format_version": FORMAT_VERSION,
        "L": m.window_len,
        "layer_spec": layer_spec(),
        "parameters": {k: {"shape": list(v.shape), "data": f"@@{k}@@"} for k, v in params.items()},
        "scaler": None if m.scaler is None else {"min": m.scaler.min, "max": m.scaler.max},
        "train_config": m.train_config,
        "meta": m.meta,
        "parent_checkpoint_hash": parent_hash,
    }
    text = json.dumps(doc, indent=1, sort_keys=False)
    for k, v in params.items():
        text = text.replace(f'"@@{k}@@"', _fmt_array(v))
    return text + "\n"


def save_model(m: Model, path, parent_hash: Optional[str] = None) -> str:
    """Write ``m`` to ``path`` and return the SHA-256 of the written file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_model(m, parent_hash), encoding="utf-8")
    os.replace(tmp, path)
    return file_hash(path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON ({exc}); truncated?") from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"checkpoint {path} does not hold a JSON object")
    return doc


def load_model(path) -> Model:
    doc = read_checkpoint(path)
    for key in ("format_version", "L", "layer_spec", "parameters"):
        if key not in doc:
            raise CheckpointError(f"checkpoint {path} lacks field {key!r}")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {doc['format_version']}")
    expected = layer_spec()
    spec = doc["layer_spec"]
    if spec.get("dense_widths") != expected["dense_widths"]:
        raise CheckpointError(
            f"dense widths {spec.get('dense_widths')} do not match the expected "
            f"{'/'.join(map(str, expected['dense_widths'][:-1]))} hidden stack "
            f"(+1 output unit)")
    if spec != expected:
        raise CheckpointError(f"layer spec {spec} does not match {expected}")

    arrays = {}
    try:
        for k, entry in doc["parameters"].items():
            arr = np.array(entry["data"], dtype=np.float64)
            arrays[k] = arr.reshape(entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed parameter entry in {path}: {exc}") from exc

    try:
        lstm = {name: LstmParams(**{g: arrays[f"{name}.{g}"] for g in LstmParams.zeros(1, 1).arrays()})
                for name in ("lstm", "bilstm_fwd", "bilstm_bwd")}
        dense = [DenseParams(arrays[f"dense{j}.W"], arrays[f"dense{j}.b"], act)
                 for j, (_, act) in enumerate(DENSE_WIDTHS)]
        scaler = None if doc.get("scaler") is None else Scaler(doc["scaler"]["min"], doc["scaler"]["max"])
        return Model(lstm["lstm"], lstm["bilstm_fwd"], lstm["bilstm_bwd"], dense, int(doc["L"]),
                     scaler=scaler, train_config=doc.get("train_config"), meta=doc.get("meta") or {})
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} lacks parameter {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(f"checkpoint {path} has inconsistent shapes: {exc}") from exc


def lineage(path, search_dir=None) -> list[dict]:
    """Walk parent hashes from ``path`` back to the root checkpoint.

    Parents are looked up among the ``*.json`` files below ``search_dir``
    (default: two levels above ``path``).  Returns one entry per checkpoint
    (``path``, ``hash``, ``phase``, ``init_seed``), newest first.
    """
    path = Path(path)
    root = Path(search_dir) if search_dir is not None else path.parent.parent
    index = {}
    for p in root.rglob("*.json"):
        try:
            index[file_hash(p)] = p
        except OSError:
            continue
    chain = []
    current: Optional[Path] = path
    while current is not None:
        doc = read_checkpoint(current)
        cfg = doc.get("train_config") or {}
        chain.append({"path": str(current), "hash": file_hash(current), "phase": cfg.get("phase"),
                      "init_seed": (doc.get("meta") or {}).get("init_seed")})
        parent = doc.get("parent_checkpoint_hash")
        if parent is None:
            break
        if parent not in index:
            raise CheckpointError(f"parent checkpoint {parent[:12]} of {current} not found")
        current = index[parent]
    return chain
