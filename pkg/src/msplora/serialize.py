"""JSON documents holding matrices as base64 little-endian float64 blobs."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .baseline import LoraAdapterSet
from .linalg import Matrix
from .model import FrozenBackbone, TinyTransformerConfig
from .pyramid import GROUPS, LayerPartition, LoraPair, PyramidAdapterSet, RankSchedule

FORMAT_VERSION = 1


def encode_matrix(m: Matrix) -> dict:
    raw = np.ascontiguousarray(m.data, dtype="<f8").tobytes()
    return {"rows": m.rows, "cols": m.cols, "data": base64.b64encode(raw).decode("ascii")}


def decode_matrix(obj: dict) -> Matrix:
    arr = np.frombuffer(base64.b64decode(obj["data"]), dtype="<f8")
    rows, cols = int(obj["rows"]), int(obj["cols"])
    if arr.size != rows * cols:
        raise ValueError(f"matrix payload has {arr.size} values, header says {rows}x{cols}")
    return Matrix(arr.astype(np.float64).reshape(rows, cols))


def adapters_to_dict(adapters) -> dict:
    return {
        "format": "adapter-set",
        "version": FORMAT_VERSION,
        "header": adapters.header(),
        "matrices": {name: encode_matrix(m) for name, m in adapters.trainable_parameters()},
    }


def adapters_from_dict(doc: dict):
    if doc.get("format") != "adapter-set":
        raise ValueError(f"not an adapter-set document (format={doc.get('format')!r})")
    h = doc["header"]
    mats = {name: decode_matrix(obj) for name, obj in doc["matrices"].items()}
    kinds = tuple(h["kinds"])

    def pair(prefix: str) -> LoraPair:
        return LoraPair(mats[f"{prefix}/A"], mats[f"{prefix}/B"], h["sigma"])

    if h["method"] == "lora":
        s = LoraAdapterSet(h["n_layers"], h["d_model"], h["rank"], kinds, h["sigma"], h["seed"])
        for layer in range(s.n_layers):
            for kind in kinds:
                s.pairs[layer, kind] = pair(f"layer/{layer:03d}/{kind}")
        return s
    if h["method"] != "msplora":
        raise ValueError(f"unknown adapter method {h['method']!r}")
    partition = LayerPartition(h["n_layers"], tuple(tuple(b) for b in h["partition"]))
    s = PyramidAdapterSet(RankSchedule(*h["ranks"]), partition, h["d_model"], kinds, h["sigma"],
                          h["seed"], tuple(h["tier_scales"]))
    for kind in kinds:
        s.global_pairs[kind] = pair(f"global/{kind}")
    for group in GROUPS:
        for kind in kinds:
            s.mid_pairs[group, kind] = pair(f"mid/{group}/{kind}")
    for layer in range(s.n_layers):
        for kind in kinds:
            s.layer_pairs[layer, kind] = pair(f"layer/{layer:03d}/{kind}")
    return s


def backbone_to_dict(backbone: FrozenBackbone) -> dict:
    return {
        "format": "backbone",
        "version": FORMAT_VERSION,
        "header": backbone.config.to_dict(),
        "matrices": {name: encode_matrix(m) for name, m in backbone.weights.items()},
    }


def backbone_from_dict(doc: dict) -> FrozenBackbone:
    if doc.get("format") != "backbone":
        raise ValueError(f"not a backbone document (format={doc.get('format')!r})")
    cfg = TinyTransformerConfig(**doc["header"])
    return FrozenBackbone(cfg, {name: decode_matrix(obj) for name, obj in doc["matrices"].items()})


def dump(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def save_adapters(adapters, path: str | Path) -> None:
    dump(adapters_to_dict(adapters), path)


def load_adapters(path: str | Path):
    return adapters_from_dict(load(path))
