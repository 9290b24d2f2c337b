"""Desk-scale pluggable learner: fixed multi-scale per-pixel features feeding
a softmax head (optionally one tanh hidden layer) trained by seeded
mini-batch SGD. Deterministic end to end; trains in well under a second on
the default tasks, yet overfits pseudo-label noise enough to reproduce the
generalization-gap behaviour the training regimes are built to probe.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import Image, LabelMap, Sample
from .metrics import ClassMapping
from .util import fingerprint_bytes, rng_for

MODEL_MAGIC = b"ATSOMDL1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    """Head architecture plus the fixed feature map it sits on."""

    channels: int = 1
    num_classes: int = 2
    hidden_units: int = 24
    feature_radii: tuple[int, ...] = (1, 3, 6)

    @property
    def n_features(self) -> int:
        return self.channels * (1 + 2 * len(self.feature_radii))

    def to_dict(self) -> dict:
        return {"channels": self.channels, "num_classes": self.num_classes,
                "hidden_units": self.hidden_units,
                "feature_radii": list(self.feature_radii)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(d["channels"], d["num_classes"], d["hidden_units"],
                   tuple(d["feature_radii"]))


@dataclass(frozen=True)
class Hyper:
    epochs: int = 20
    lr: float = 0.5
    lr_decay: float = 1.0
    batch_size: int = 1024
    l2: float = 1e-4

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "lr": self.lr, "lr_decay": self.lr_decay,
                "batch_size": self.batch_size, "l2": self.l2}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        return cls(**d)


@dataclass(frozen=True)
class InitPolicy:
    """fresh = new head; continued = start at a teacher's weights;
    partial = keep a base model's hidden layer, reinitialise the output.

    ``init_seed`` pins the fresh weights independently of the training seed,
    so every generation can start from the same initialized head while the
    SGD shuffle still varies per training."""

    kind: str
    base: "Model | None" = None
    init_seed: int | None = None

    @classmethod
    def fresh(cls, init_seed: int | None = None) -> "InitPolicy":
        return cls("fresh", None, init_seed)

    @classmethod
    def continued(cls, model: "Model") -> "InitPolicy":
        return cls("continued", model)

    @classmethod
    def partial(cls, model: "Model", init_seed: int | None = None) -> "InitPolicy":
        return cls("partial", model, init_seed)

    def describe(self) -> str:
        if self.kind == "fresh":
            return "fresh" if self.init_seed is None else f"fresh[{self.init_seed}]"
        suffix = "" if self.init_seed is None else f"[{self.init_seed}]"
        return f"{self.kind}_from({self.base.model_id}){suffix}"


@dataclass(frozen=True)
class Provenance:
    seed: int
    init_policy: str
    dataset_ids: tuple[str, ...]
    dataset_tags: tuple[str, ...]
    label_hash: str
    epochs: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "init_policy": self.init_policy,
                "dataset_ids": list(self.dataset_ids),
                "dataset_tags": list(self.dataset_tags),
                "label_hash": self.label_hash, "epochs": self.epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(d["seed"], d["init_policy"], tuple(d["dataset_ids"]),
                   tuple(d["dataset_tags"]), d["label_hash"], d["epochs"])


@dataclass(frozen=True)
class Model:
    arch: ArchSpec
    params: tuple[np.ndarray, ...]  # (W, b) or (W1, b1, W2, b2)
    provenance: Provenance
    model_id: str
    loss_history: tuple[float, ...] = ()

    def __post_init__(self):
        for p in self.params:
            if not np.isfinite(p).all():
                raise ValueError(f"model {self.model_id} holds non-finite weights")
            p.setflags(write=False)


@dataclass(frozen=True)
class TrainItem:
    sample: Sample
    label: LabelMap
    source_tag: str  # "ground_truth" | "pseudo"

    def __post_init__(self):
        if self.source_tag not in ("ground_truth", "pseudo"):
            raise ValueError(f"bad source_tag {self.source_tag!r}")
        if (self.label.height, self.label.width) != (self.sample.image.height,
                                                     self.sample.image.width):
            raise ValueError(f"train item {self.sample.id}: label dims mismatch")


@dataclass
class TrainSet:
    items: list[TrainItem]
    loss_class_mapping: ClassMapping | None = None


def extract_features(image: Image, radii: tuple[int, ...]) -> np.ndarray:
    """Per-pixel features: raw value plus box mean/std at each radius,
    per channel. Shape (H*W, channels*(1+2*len(radii)))."""
    h, w, c = image.data.shape
    cols = []
    for ch in range(c):
        plane = np.ascontiguousarray(image.data[:, :, ch])
        cols.append(plane.ravel())
        for r in radii:
            mean, sq = _kernels.box_stats(plane, int(r))
            var = sq - mean * mean
            np.maximum(var, 0.0, out=var)
            cols.append(mean.ravel())
            cols.append(np.sqrt(var).ravel())
    return np.ascontiguousarray(np.stack(cols, axis=1))


def _init_params(arch: ArchSpec, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    f, h, k = arch.n_features, arch.hidden_units, arch.num_classes
    if h == 0:
        w = rng.normal(0.0, 1.0 / np.sqrt(f), size=(f, k))
        return (w, np.zeros(k))
    w1 = rng.normal(0.0, 1.0 / np.sqrt(f), size=(f, h))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, k))
    return (w1, np.zeros(h), w2, np.zeros(k))


def _resolve_init(arch: ArchSpec, init: InitPolicy, seed: int) -> tuple[np.ndarray, ...]:
    init_rng = rng_for(seed if init.init_seed is None else init.init_seed, "init")
    if init.kind == "fresh":
        return _init_params(arch, init_rng)
    if init.base is None:
        raise ValueError(f"init policy {init.kind!r} requires a base model")
    if init.base.arch != arch:
        raise ValueError("init base model arch_spec does not match")
    base = tuple(np.array(p) for p in init.base.params)
    if init.kind == "continued":
        return base
    if init.kind == "partial":
        if arch.hidden_units == 0:
            return _init_params(arch, init_rng)
        fresh = _init_params(arch, init_rng)
        return (base[0], base[1], fresh[2], fresh[3])
    raise ValueError(f"unknown init policy {init.kind!r}")


def _flatten_train_set(arch: ArchSpec, train_set: TrainSet):
    """Stack per-pixel rows: features, labels, reduced-space flags, group table.

    With a loss mapping set, items labelled in the coarse space are flagged
    reduced (their loss sums class scores within each group); items labelled
    in the head's own space train with the plain cross-entropy.
    """
    mapping = train_set.loss_class_mapping
    if mapping is not None and mapping.source_classes != arch.num_classes:
        raise ValueError(f"loss mapping expects {mapping.source_classes} source "
                         f"classes, head has {arch.num_classes}")
    xs, ys, reds = [], [], []
    for item in train_set.items:
        k = item.label.num_classes
        if mapping is not None and k == mapping.target_classes:
            reduced = True
        elif k == arch.num_classes:
            reduced = False
        else:
            raise ValueError(f"item {item.sample.id}: label has {k} classes, "
                             f"head expects {arch.num_classes}"
                             + (f" (or {mapping.target_classes} reduced)"
                                if mapping is not None else ""))
        xs.append(extract_features(item.sample.image, arch.feature_radii))
        ys.append(item.label.data.ravel())
        reds.append(np.full(item.label.data.size, reduced, dtype=np.uint8))
    X = np.ascontiguousarray(np.concatenate(xs, axis=0))
    y = np.ascontiguousarray(np.concatenate(ys).astype(np.int32))
    red = np.ascontiguousarray(np.concatenate(reds))
    if mapping is not None:
        group = mapping.as_array()
    else:
        group = np.arange(arch.num_classes, dtype=np.int32)
    return X, y, red, group


def _fingerprint(train_set: TrainSet) -> tuple[tuple[str, ...], tuple[str, ...], str]:
    items = sorted(train_set.items, key=lambda it: it.sample.id)
    ids = tuple(it.sample.id for it in items)
    tags = tuple(it.source_tag for it in items)
    label_hash = fingerprint_bytes(*(it.label.data.tobytes() for it in items))
    return ids, tags, label_hash


def train(arch: ArchSpec, train_set: TrainSet, init: InitPolicy, hyper: Hyper,
          seed: int) -> Model:
    """Train the head with seeded mini-batch SGD; deterministic in all inputs.

    Ground-truth and pseudo items are weighted uniformly. Items whose label
    lives in the mapping's coarse space are scored by summing class
    probabilities within each group before the cross-entropy.
    """
    if not train_set.items:
        raise ValueError("train_set is empty")
    for item in train_set.items:
        if item.sample.image.channels != arch.channels:
            raise ValueError(f"item {item.sample.id}: image channels "
                             f"{item.sample.image.channels} != arch {arch.channels}")
    X, y, red, group = _flatten_train_set(arch, train_set)
    params = tuple(np.ascontiguousarray(p) for p in _resolve_init(arch, init, seed))
    shuffle_rng = rng_for(seed, "shuffle")
    n = X.shape[0]
    losses = []
    lr = hyper.lr
    for epoch in range(hyper.epochs):
        perm = np.ascontiguousarray(shuffle_rng.permutation(n).astype(np.int64))
        if arch.hidden_units == 0:
            loss = _kernels.sgd_epoch_linear(X, y, red, group, params[0], params[1],
                                             perm, int(hyper.batch_size), lr, hyper.l2)
        else:
            loss = _kernels.sgd_epoch_mlp(X, y, red, group, *params, perm,
                                          int(hyper.batch_size), lr, hyper.l2)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite training loss {loss} at epoch {epoch} (lr={lr}, "
                f"batch_size={hyper.batch_size}, n_rows={n})")
        losses.append(float(loss))
        lr *= hyper.lr_decay

    ids, tags, label_hash = _fingerprint(train_set)
    prov = Provenance(seed, init.describe(), ids, tags, label_hash, hyper.epochs)
    model_id = fingerprint_bytes(
        json.dumps(arch.to_dict(), sort_keys=True).encode(),
        json.dumps(prov.to_dict(), sort_keys=True).encode(),
        json.dumps(hyper.to_dict(), sort_keys=True).encode(),
    )
    return Model(arch, params, prov, model_id, tuple(losses))


def head_scores(model: Model, features: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for a stack of feature rows."""
    if model.arch.hidden_units == 0:
        return _kernels.forward_linear(features, *model.params)
    return _kernels.forward_mlp(features, *model.params)


def mean_cross_entropy(model: Model, features: np.ndarray, labels: np.ndarray,
                       reduced: np.ndarray | None = None,
                       mapping: ClassMapping | None = None) -> float:
    """Mean per-row loss under the same grouping rule the trainer uses."""
    P = head_scores(model, features)
    n, k = P.shape
    if reduced is None:
        reduced = np.zeros(n, dtype=np.uint8)
    group = mapping.as_array() if mapping is not None else np.arange(k, dtype=np.int32)
    member = np.zeros((n, k))
    is_red = reduced.astype(bool)
    if is_red.any():
        member[is_red] = group[np.newaxis, :] == labels[is_red, np.newaxis]
    rows = np.arange(n)
    member[rows[~is_red], labels[~is_red]] = 1.0
    mass = (P * member).sum(axis=1)
    return float(-np.log(mass).mean())


def predict(model: Model, image: Image) -> tuple[LabelMap, np.ndarray]:
    """Argmax label map plus the (H, W, K) per-class score grid."""
    if image.channels != model.arch.channels:
        raise ValueError(f"image has {image.channels} channels, model expects "
                         f"{model.arch.channels}")
    feats = extract_features(image, model.arch.feature_radii)
    P = head_scores(model, feats)
    h, w = image.height, image.width
    labels = P.argmax(axis=1).astype(np.int32).reshape(h, w)
    return LabelMap(labels, model.arch.num_classes), P.reshape(h, w, model.arch.num_classes)


def fuse_majority(predictions: list[LabelMap]) -> LabelMap:
    """Per-pixel modal class; ties resolve to the lowest class index."""
    if not predictions:
        raise ValueError("need at least one prediction to fuse")
    first = predictions[0]
    for p in predictions[1:]:
        if (p.height, p.width, p.num_classes) != (first.height, first.width,
                                                  first.num_classes):
            raise ValueError("fused predictions must share dims and num_classes")
    votes = np.ascontiguousarray(
        np.stack([p.data.ravel() for p in predictions], axis=0).astype(np.int32))
    fused = _kernels.majority_vote(votes, first.num_classes)
    return LabelMap(fused.reshape(first.height, first.width), first.num_classes)


# Involutive grid transforms used as desk-scale analogs of anatomical views.
_VIEW_TRANSFORMS = {
    "identity": lambda a: a,
    "transpose": lambda a: np.swapaxes(a, 0, 1),
    "flip_h": lambda a: a[:, ::-1],
    "flip_v": lambda a: a[::-1, :],
    "rot180": lambda a: a[::-1, ::-1],
}


@dataclass(frozen=True)
class ViewSpec:
    view_id: str
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in _VIEW_TRANSFORMS:
            raise ValueError(f"unknown view transform {self.transform!r}; "
                             f"choose from {sorted(_VIEW_TRANSFORMS)}")

    def apply(self, image: Image) -> Image:
        return Image(np.ascontiguousarray(_VIEW_TRANSFORMS[self.transform](image.data)))

    def invert(self, label: LabelMap) -> LabelMap:
        # all registered transforms are involutive
        out = _VIEW_TRANSFORMS[self.transform](label.data)
        return LabelMap(np.ascontiguousarray(out), label.num_classes)


def predict_multiview(models: dict[str, Model], views: list[ViewSpec],
                      image: Image) -> LabelMap:
    """Predict through each view's transform, invert, and majority-fuse."""
    maps = []
    for view in views:
        if view.view_id not in models:
            raise KeyError(f"no model for view {view.view_id!r}")
        label, _ = predict(models[view.view_id], view.apply(image))
        maps.append(view.invert(label))
    return fuse_majority(maps)


def save_model(model: Model, path) -> None:
    """JSON header plus flat little-endian f64 weight blob; bit-exact."""
    header = {
        "format": "atso-model@1",
        "arch": model.arch.to_dict(),
        "provenance": model.provenance.to_dict(),
        "model_id": model.model_id,
        "loss_history": list(model.loss_history),
        "param_shapes": [list(p.shape) for p in model.params],
    }
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(blob)


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode())
    if header.get("format") != "atso-model@1":
        raise ValueError(f"{path}: unknown model format")
    arch = ArchSpec.from_dict(header["arch"])
    prov = Provenance.from_dict(header["provenance"])
    params = []
    offset = 12 + hlen
    for shape in header["param_shapes"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        params.append(np.ascontiguousarray(arr))
        offset += count * 8
    return Model(arch, tuple(params), prov, header["model_id"],
                 tuple(header["loss_history"]))
