"""Split-model runtime: party-local bottoms, concatenation, active-party top."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import AlignmentError, DimensionError, DivergenceError, NumericError, ValidationError
from .grad import MlpParams, init_mlp, mlp_backward, mlp_forward, softmax, softmax_cross_entropy

DEFAULT_EMBED_DIM = 16


@dataclass(frozen=True)
class PartySpec:
    party_id: int
    role: str
    feature_slice: tuple  # half-open column range (start, stop)
    bottom_arch: tuple = (32, DEFAULT_EMBED_DIM)

    def __post_init__(self):
        if self.role not in ("passive", "active"):
            raise ValidationError(f"party {self.party_id}: role must be passive or active")
        start, stop = self.feature_slice
        if not 0 <= start < stop:
            raise ValidationError(f"party {self.party_id}: empty or negative feature slice")
        object.__setattr__(self, "feature_slice", (int(start), int(stop)))
        object.__setattr__(self, "bottom_arch", tuple(int(a) for a in self.bottom_arch))

    @property
    def width(self) -> int:
        return self.feature_slice[1] - self.feature_slice[0]


def validate_party_specs(specs: Sequence[PartySpec], n_features: int) -> list:
    """Check disjoint covering slices and a single active party; return specs sorted by id."""
    specs = sorted(specs, key=lambda s: s.party_id)
    if len({s.party_id for s in specs}) != len(specs):
        raise ValidationError("duplicate party ids")
    if sum(s.role == "active" for s in specs) != 1:
        raise ValidationError("exactly one party must be active")
    by_start = sorted(specs, key=lambda s: s.feature_slice[0])
    pos = 0
    for s in by_start:
        start, stop = s.feature_slice
        if start < pos:
            raise ValidationError(f"party {s.party_id}: feature slice overlaps another party")
        if start > pos:
            raise ValidationError(f"columns [{pos}, {start}) are not owned by any party")
        pos = stop
    if pos != n_features:
        raise ValidationError(f"party slices cover {pos} columns, dataset has {n_features}")
    return specs


def even_party_specs(n_features: int, n_parties: int, embed_dim=DEFAULT_EMBED_DIM,
                     hidden=(32,)) -> list:
    """Split columns as evenly as possible; the last party is active."""
    if not 1 <= n_parties <= n_features:
        raise ValidationError("need 1 <= n_parties <= n_features")
    edges = np.linspace(0, n_features, n_parties + 1).round().astype(int)
    return [
        PartySpec(i, "active" if i == n_parties - 1 else "passive",
                  (edges[i], edges[i + 1]), tuple(hidden) + (embed_dim,))
        for i in range(n_parties)
    ]


@dataclass(frozen=True)
class VerticalDataset:
    """Aligned samples with one feature block per party (ordered by party id)."""

    sample_ids: np.ndarray
    features: tuple
    labels: np.ndarray
    n_classes: int
    image_shape: Optional[tuple] = None
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        ids = np.asarray(self.sample_ids)
        feats = tuple(np.asarray(f, dtype=np.float64) for f in self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        if not feats:
            raise ValidationError("dataset needs at least one feature block")
        for i, f in enumerate(feats):
            if f.ndim != 2 or f.shape[0] != ids.shape[0]:
                raise DimensionError(f"feature block {i} has shape {f.shape}, expected ({ids.shape[0]}, d)")
            if not np.all(np.isfinite(f)):
                raise ValidationError(f"feature block {i} contains non-finite values")
        if labels.shape != ids.shape:
            raise DimensionError("labels and sample ids differ in length")
        if self.n_classes < 2:
            raise ValidationError("need at least two classes")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return int(self.sample_ids.shape[0])

    @property
    def n_parties(self) -> int:
        return len(self.features)

    @property
    def widths(self) -> list:
        return [f.shape[1] for f in self.features]

    def matrix(self) -> np.ndarray:
        return np.hstack(self.features)

    def subset(self, rows) -> "VerticalDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            sample_ids=self.sample_ids[rows],
            features=tuple(f[rows] for f in self.features),
            labels=self.labels[rows],
        )

    def rows_for_ids(self, ids) -> np.ndarray:
        index = {sid: i for i, sid in enumerate(self.sample_ids.tolist())}
        try:
            return np.array([index[i] for i in np.asarray(ids).tolist()], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"sample id {exc.args[0]} not in dataset") from None


def psi_align(id_sets: Sequence[Sequence]) -> list:
    """Plaintext private-set-intersection stand-in: sorted common ids."""
    if not id_sets:
        raise AlignmentError("no parties to align")
    for i, ids in enumerate(id_sets):
        if len(set(ids)) != len(ids):
            raise ValidationError(f"party {i}: duplicate sample ids")
    common = set(id_sets[0])
    for ids in id_sets[1:]:
        common &= set(ids)
    if not common:
        raise AlignmentError("parties share no sample ids")
    return sorted(common)


def align_parties(id_sets, matrices, labels, n_classes, label_party=-1) -> VerticalDataset:
    """Re-index every party's matrix to the common id ordering."""
    common = psi_align(id_sets)
    feats = []
    for ids, mat in zip(id_sets, matrices):
        pos = {sid: i for i, sid in enumerate(ids)}
        feats.append(np.asarray(mat, dtype=np.float64)[[pos[c] for c in common]])
    lab_pos = {sid: i for i, sid in enumerate(id_sets[label_party])}
    y = np.asarray(labels)[[lab_pos[c] for c in common]]
    return VerticalDataset(np.asarray(common), tuple(feats), y, n_classes)


@dataclass(frozen=True)
class SplitModel:
    bottoms: tuple
    top: MlpParams
    anchor: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        bottoms = tuple(self.bottoms)
        width = sum(b.out_dim for b in bottoms)
        if width != self.top.in_dim:
            raise DimensionError(f"bottom embeddings total {width} != top input {self.top.in_dim}")
        object.__setattr__(self, "bottoms", bottoms)
        if self.anchor is not None:
            anchor = tuple(np.asarray(a, dtype=np.float64) for a in self.anchor)
            live = self.tensors()
            if len(anchor) != len(live) or any(a.shape != t.shape for a, t in zip(anchor, live)):
                raise DimensionError("anchor is not shape-congruent with the live parameters")
            object.__setattr__(self, "anchor", anchor)

    @property
    def embed_widths(self) -> list:
        return [b.out_dim for b in self.bottoms]

    @property
    def n_classes(self) -> int:
        return self.top.out_dim

    def groups(self) -> list:
        """Parameter groups: one per bottom model, then the top model."""
        return list(self.bottoms) + [self.top]

    def group_sizes(self) -> list:
        return [len(g.tensors()) for g in self.groups()]

    def tensors(self) -> list:
        out = []
        for g in self.groups():
            out.extend(g.tensors())
        return out

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "SplitModel":
        tensors = list(tensors)
        pos = 0
        new = []
        for g in self.groups():
            k = len(g.tensors())
            new.append(g.with_tensors(tensors[pos:pos + k]))
            pos += k
        if pos != len(tensors):
            raise DimensionError(f"expected {pos} tensors, got {len(tensors)}")
        return SplitModel(tuple(new[:-1]), new[-1], self.anchor)

    def copy(self) -> "SplitModel":
        return self.with_tensors([t.copy() for t in self.tensors()])

    def freeze_anchor(self) -> "SplitModel":
        """Copy of the model whose anchor is a deep copy of the current parameters."""
        return replace(self.copy(), anchor=tuple(t.copy() for t in self.tensors()))


def build_split_model(party_specs: Sequence[PartySpec], n_classes: int, top_hidden=(32,),
                      seed=0) -> SplitModel:
    rng = np.random.default_rng(seed)
    specs = sorted(party_specs, key=lambda s: s.party_id)
    bottoms = tuple(init_mlp((s.width,) + s.bottom_arch, rng) for s in specs)
    width = sum(b.out_dim for b in bottoms)
    top = init_mlp((width,) + tuple(top_hidden) + (n_classes,), rng)
    return SplitModel(bottoms, top)


def _check_model_data(model: SplitModel, data: VerticalDataset):
    if len(model.bottoms) != data.n_parties:
        raise DimensionError(f"model has {len(model.bottoms)} parties, data has {data.n_parties}")
    for i, (b, w) in enumerate(zip(model.bottoms, data.widths)):
        if b.in_dim != w:
            raise DimensionError(f"party {i}: bottom expects {b.in_dim} features, data has {w}")


def _rows(data: VerticalDataset, rows) -> np.ndarray:
    if rows is None:
        return np.arange(data.n_samples)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim != 1:
        raise DimensionError("rows must be a 1-d index array")
    if rows.size and (rows.min() < 0 or rows.max() >= data.n_samples):
        raise ValidationError("row index out of dataset bounds")
    return rows


def forward_round(model: SplitModel, data: VerticalDataset, rows=None, noise_std=0.0,
                  rng: Optional[np.random.Generator] = None):
    """Party embeddings, concatenation at the active party, top-model logits.

    Returns ``(global_embedding, logits)``. With ``noise_std > 0`` Gaussian noise
    is drawn from ``rng`` (required) and added to each party's embedding.
    """
    _check_model_data(model, data)
    rows = _rows(data, rows)
    if noise_std < 0:
        raise ValidationError("noise_std must be >= 0")
    parts = []
    for bottom, feats in zip(model.bottoms, data.features):
        h = mlp_forward(bottom, feats[rows])
        if noise_std > 0:
            if rng is None:
                raise ValidationError("embedding noise needs a seeded rng")
            h = h + rng.normal(0.0, noise_std, size=h.shape)
        parts.append(h)
    h = np.hstack(parts)
    return h, mlp_forward(model.top, h)


def backward_round(model: SplitModel, data: VerticalDataset, rows, grad_logits,
                   embedding=None) -> list:
    """Gradients for every parameter tensor, aligned with ``model.tensors()``.

    ``embedding`` is the (possibly noisy) global embedding used in the forward
    pass; when omitted it is recomputed without noise.
    """
    _check_model_data(model, data)
    rows = _rows(data, rows)
    if embedding is None:
        embedding, _ = forward_round(model, data, rows)
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (rows.size, model.top.out_dim):
        raise DimensionError(f"logit gradient shape {g.shape} != {(rows.size, model.top.out_dim)}")
    top_grads, g_h = mlp_backward(model.top, embedding, g)
    widths = model.embed_widths
    if g_h.shape[1] != sum(widths):
        raise DimensionError("embedding gradient width does not match party embedding widths")
    out = []
    for bottom, feats, g_i in zip(model.bottoms, data.features, np.split(g_h, np.cumsum(widths)[:-1], axis=1)):
        grads, _ = mlp_backward(bottom, feats[rows], g_i)
        out.extend(grads.tensors())
    out.extend(top_grads.tensors())
    return out


def predict_proba(model: SplitModel, data: VerticalDataset, rows=None) -> np.ndarray:
    _, logits = forward_round(model, data, rows)
    return softmax(logits)


def predict(model: SplitModel, data: VerticalDataset, rows=None) -> np.ndarray:
    _, logits = forward_round(model, data, rows)
    return logits.argmax(axis=1)


def cross_entropy_grads(model: SplitModel, data: VerticalDataset, rows, noise_std=0.0, rng=None):
    """Mean cross-entropy on ``rows`` and its full parameter gradient."""
    rows = _rows(data, rows)
    h, logits = forward_round(model, data, rows, noise_std, rng)
    loss, g = softmax_cross_entropy(logits, data.labels[rows])
    return loss, backward_round(model, data, rows, g, embedding=h)


def vfl_train(model: SplitModel, data: VerticalDataset, epochs: int, lr: float, batch_size: int,
              seed=0, rows=None, noise_std=0.0):
    """Mini-batch gradient descent on cross-entropy. Returns ``(model, loss_history)``."""
    if lr <= 0:
        raise ValidationError("lr must be positive")
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if epochs < 0:
        raise ValidationError("epochs must be >= 0")
    rows = _rows(data, rows)
    if rows.size == 0:
        raise ValidationError("no training rows")
    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng([seed, 1])
    params = [t.copy() for t in model.tensors()]
    current = model.with_tensors(params)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(rows)
        total = 0.0
        for start in range(0, order.size, batch_size):
            batch = order[start:start + batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = cross_entropy_grads(current, data, batch, noise_std, noise_rng)
            except NumericError as err:
                raise DivergenceError(f"training diverged in epoch {epoch}: {err}", epoch) from err
            if not np.isfinite(loss):
                raise DivergenceError(f"training loss became non-finite in epoch {epoch}", epoch)
            for p, g in zip(params, grads):
                p -= lr * g
            if not all(np.all(np.isfinite(p)) for p in params):
                raise DivergenceError(f"parameters became non-finite in epoch {epoch}", epoch)
            current = model.with_tensors(params)
            total += loss * batch.size
        history.append(total / order.size)
    return current, history
