"""Save and load split models and datasets as ``.npz`` archives."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .exceptions import IngestionError
from .grad import Layer, MlpParams
from .vfl import SplitModel, VerticalDataset


def _mlp_meta(params: MlpParams) -> list:
    return [layer.activation for layer in params.layers]


def save_model(path, model: SplitModel):
    arrays = {f"t{i}": t for i, t in enumerate(model.tensors())}
    meta = {
        "bottoms": [_mlp_meta(b) for b in model.bottoms],
        "top": _mlp_meta(model.top),
    }
    arrays["meta"] = np.array(json.dumps(meta))
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> SplitModel:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            n = len(z.files) - 1
            tensors = [z[f"t{i}"] for i in range(n)]
    except (OSError, KeyError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot load model ({exc})") from exc
    pos = 0

    def take(acts):
        nonlocal pos
        layers = []
        for act in acts:
            layers.append(Layer(tensors[pos], tensors[pos + 1], act))
            pos += 2
        return MlpParams(tuple(layers))

    bottoms = tuple(take(a) for a in meta["bottoms"])
    return SplitModel(bottoms, take(meta["top"]))


def save_dataset(path, data: VerticalDataset, **extra_arrays):
    arrays = {f"f{i}": f for i, f in enumerate(data.features)}
    arrays.update(sample_ids=data.sample_ids, labels=data.labels,
                  n_classes=np.array(data.n_classes),
                  image_shape=np.array(data.image_shape if data.image_shape else (0, 0)))
    arrays.update(extra_arrays)
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path):
    """Returns ``(dataset, extra_arrays)``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            files = dict((k, z[k]) for k in z.files)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot load dataset ({exc})") from exc
    n_blocks = sum(1 for k in files if k.startswith("f") and k[1:].isdigit())
    shape = tuple(int(v) for v in files.pop("image_shape"))
    data = VerticalDataset(files.pop("sample_ids"), tuple(files.pop(f"f{i}") for i in range(n_blocks)),
                           files.pop("labels"), int(files.pop("n_classes")),
                           image_shape=shape if shape != (0, 0) else None)
    return data, files
