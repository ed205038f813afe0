"""Dataset construction: generators, CSV ingestion, partitioning and splitting."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.model_selection import train_test_split

from .exceptions import IngestionError, ValidationError
from .vfl import PartySpec, VerticalDataset, validate_party_specs


def _class_centers(n_classes: int, n_features: int, separation: float) -> np.ndarray:
    centers = np.zeros((n_classes, n_features))
    if n_features >= n_classes:
        # scaled simplex corners: every pair sits `separation` apart
        centers[:, :n_classes] = np.eye(n_classes) * separation / math.sqrt(2.0)
    else:
        radius = separation / (2.0 * math.sin(math.pi / n_classes))
        angles = 2.0 * math.pi * np.arange(n_classes) / n_classes
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    return centers - centers.mean(axis=0)


def _shuffled(x: np.ndarray, y: np.ndarray, rng, **kw) -> VerticalDataset:
    order = rng.permutation(len(y))
    return VerticalDataset(np.arange(len(y)), (x[order],), y[order], **kw)


def gen_tabular(n_classes: int, per_class: int, n_features: int, separation: float,
                seed=0) -> VerticalDataset:
    """Unit-covariance Gaussian blobs whose centers are ``separation`` apart."""
    if n_classes < 2 or n_features < 2:
        raise ValidationError("need n_classes >= 2 and n_features >= 2")
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    centers = _class_centers(n_classes, n_features, separation)
    y = np.repeat(np.arange(n_classes), per_class)
    x = centers[y] + rng.standard_normal((y.size, n_features))
    return _shuffled(x, y, rng, n_classes=n_classes)


def _bar_pattern(angle: float, height: int, width: int, thickness=1.0) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    # distance of each pixel to the line through the center at `angle`
    dist = np.abs(-(rows - cy) * math.cos(angle) + (cols - cx) * math.sin(angle))
    return (dist <= thickness).astype(np.float64)


def gen_images(n_classes: int, per_class: int, height=16, width=16, seed=0, noise=0.15,
               intensity=0.8) -> VerticalDataset:
    """Oriented-bar images, one orientation per class, plus clipped pixel noise.

    Pixels lie in ``[0, 1]``; bars use ``intensity`` so a full-white trigger
    patch stays distinguishable. Images are flattened row-major.
    """
    if height < 8 or width < 8:
        raise ValidationError("images must be at least 8x8")
    if n_classes < 2 or per_class < 1:
        raise ValidationError("need n_classes >= 2 and per_class >= 1")
    rng = np.random.default_rng(seed)
    patterns = np.stack([
        intensity * _bar_pattern(math.pi * c / n_classes, height, width)
        for c in range(n_classes)
    ])
    y = np.repeat(np.arange(n_classes), per_class)
    imgs = patterns[y]
    if noise > 0:
        imgs = np.clip(imgs + rng.normal(0.0, noise, size=imgs.shape), 0.0, 1.0)
    x = imgs.reshape(y.size, height * width)
    return _shuffled(x, y, rng, n_classes=n_classes, image_shape=(height, width))


def _parse_float(cell: str) -> Optional[float]:
    try:
        value = float(cell)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_csv(path, label_column: str, delimiter=",", standardize=True) -> VerticalDataset:
    """Read a headed CSV into a single-block dataset.

    Numeric columns become features as-is (optionally standardized); text
    columns are one-hot encoded with levels in lexicographic order.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: no such file")
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter=delimiter)
            header = next(reader, None)
            records = [row for row in reader if row]
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if not header:
        raise IngestionError(f"{path}: missing header row")
    header = [h.strip() for h in header]
    if label_column not in header:
        raise ValidationError(f"label column {label_column!r} not in header")
    for i, row in enumerate(records):
        if len(row) != len(header):
            raise IngestionError(f"row {i + 1}: expected {len(header)} cells, got {len(row)}")
    if not records:
        raise IngestionError(f"{path}: no data rows")

    columns, names = [], []
    for j, name in enumerate(header):
        if name == label_column:
            continue
        cells = [row[j].strip() for row in records]
        parsed = [_parse_float(c) for c in cells]
        if all(v is not None for v in parsed):
            col = np.array(parsed)
            if standardize:
                std = col.std()
                col = (col - col.mean()) / (std if std > 0 else 1.0)
            columns.append(col[:, None])
            names.append(name)
            continue
        for i, (cell, value) in enumerate(zip(cells, parsed)):
            if cell == "" or (value is None and any(v is not None for v in parsed)):
                raise IngestionError(f"row {i + 1}, column {name!r}: cannot parse {cell!r}")
        levels = sorted(set(cells))
        index = {lv: k for k, lv in enumerate(levels)}
        onehot = np.zeros((len(cells), len(levels)))
        onehot[np.arange(len(cells)), [index[c] for c in cells]] = 1.0
        columns.append(onehot)
        names.extend(f"{name}={lv}" for lv in levels)
    if not columns:
        raise ValidationError("no feature columns besides the label")

    raw_labels = [row[header.index(label_column)].strip() for row in records]
    numeric = [_parse_float(v) for v in raw_labels]
    if all(v is not None for v in numeric):
        levels = sorted(set(numeric))
        y = np.array([levels.index(v) for v in numeric])
    else:
        levels = sorted(set(raw_labels))
        y = np.array([levels.index(v) for v in raw_labels])
    n_classes = max(len(levels), 2)
    return VerticalDataset(np.arange(len(records)), (np.hstack(columns),), y, n_classes,
                           feature_names=tuple(names))


def vertical_partition(dataset: VerticalDataset, party_specs: Sequence[PartySpec]) -> VerticalDataset:
    """Split the full feature matrix column-wise, one block per party (by id)."""
    full = dataset.matrix()
    specs = validate_party_specs(party_specs, full.shape[1])
    blocks = tuple(full[:, s.feature_slice[0]:s.feature_slice[1]] for s in specs)
    return replace(dataset, features=blocks)


@dataclass(frozen=True)
class UnlearnRequest:
    classes: tuple
    fraction: float

    def __post_init__(self):
        classes = tuple(int(c) for c in self.classes)
        if not classes:
            raise ValidationError("request needs at least one class")
        if len(set(classes)) != len(classes):
            raise ValidationError("requested classes must be distinct")
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError("fraction must lie in (0, 1]")
        object.__setattr__(self, "classes", classes)

    @property
    def mode(self) -> str:
        return "label" if self.fraction == 1.0 else "sample"


@dataclass(frozen=True)
class PartitionResult:
    unlearn_ids: np.ndarray
    remain_ids: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.unlearn_ids)
        r = np.asarray(self.remain_ids)
        if len(np.unique(u)) != len(u) or len(np.unique(r)) != len(r):
            raise ValidationError("duplicate ids inside a partition side")
        if np.intersect1d(u, r).size:
            raise ValidationError("an id appears in both the forget and retained sets")
        object.__setattr__(self, "unlearn_ids", u)
        object.__setattr__(self, "remain_ids", r)


def split_unlearn(dataset: VerticalDataset, request: UnlearnRequest, seed=0,
                  rows=None) -> PartitionResult:
    """Move ``floor(fraction * count)`` seeded ids of each requested class to the forget set.

    ``rows`` restricts the candidate pool (e.g. to the training split).
    """
    pool = np.arange(dataset.n_samples) if rows is None else np.asarray(rows, dtype=np.int64)
    labels = dataset.labels[pool]
    rng = np.random.default_rng(seed)
    chosen = []
    for c in request.classes:
        members = pool[labels == c]
        if members.size == 0:
            raise ValidationError(f"class {c} has no samples to unlearn")
        k = math.floor(round(request.fraction * members.size, 9))
        chosen.append(np.sort(rng.choice(members, size=k, replace=False)))
    forget = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    remain = np.setdiff1d(pool, forget)
    if remain.size == 0:
        raise ValidationError("request leaves nothing to retain")
    return PartitionResult(dataset.sample_ids[forget], dataset.sample_ids[remain])


def stratified_split(dataset: VerticalDataset, test_fraction=0.2, seed=0):
    """Seeded class-stratified ``(train_rows, test_rows)``."""
    rows = np.arange(dataset.n_samples)
    train, test = train_test_split(rows, test_size=test_fraction, random_state=seed,
                                   stratify=dataset.labels)
    return np.sort(train), np.sort(test)


def noniid_perturb(dataset: VerticalDataset, party_id: int, noise_std: float, seed=0) -> VerticalDataset:
    """Add seeded Gaussian noise to one party's feature block only."""
    if not 0 <= party_id < dataset.n_parties:
        raise ValidationError(f"party {party_id} does not exist")
    if noise_std < 0:
        raise ValidationError("noise_std must be >= 0")
    if noise_std == 0:
        return dataset
    rng = np.random.default_rng(seed)
    feats = list(dataset.features)
    feats[party_id] = feats[party_id] + rng.normal(0.0, noise_std, size=feats[party_id].shape)
    return replace(dataset, features=tuple(feats))
