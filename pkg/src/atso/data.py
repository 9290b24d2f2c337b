"""Synthetic segmentation tasks: generation, splits, domain shift and IO.

A task is a bundle of a small labeled set S, a large reference set R whose
ground truth is hidden behind an evaluation-only accessor, and a test set E.
Images are soft-edged class blobs over a textured background with per-sample
contrast/brightness jitter, which is what makes some samples genuinely hard
and lets pseudo-label noise behave the way it does on real scans.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .util import derive_seed, rng_for

MASK_MAGIC = b"ATSOMSK1"


class MaskFormatError(ValueError):
    """Raised when a mask file is malformed; message names the bad field."""


class GenerationError(RuntimeError):
    """Raised when a sample cannot be generated within the frequency band."""


@dataclass(frozen=True)
class Image:
    """Row-major (height, width, channels) float grid."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] < 1:
            raise ValueError(f"image data must be (H, W, C>=1), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices in [0, num_classes)."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.int32))
        if arr.ndim != 2:
            raise ValueError(f"label data must be 2-D, got shape {arr.shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(
                f"label values must lie in [0, {self.num_classes}), "
                f"got range [{arr.min()}, {arr.max()}]"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Sample:
    id: str
    image: Image
    label: LabelMap | None
    domain_tag: str = "source"

    def __post_init__(self):
        if self.label is not None:
            if (self.label.height, self.label.width) != (self.image.height, self.image.width):
                raise ValueError(f"sample {self.id}: label dims do not match image dims")


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of the synthetic task family.

    Foreground classes are soft-edged blobs; per-class pixel frequency is
    guaranteed to land inside [min_class_frac, max_class_frac] (or the rare
    band for the trailing ``rare_classes`` classes). ``contrast_range`` and
    ``brightness_range`` are drawn per sample and control task hardness.
    """

    height: int = 32
    width: int = 32
    channels: int = 1
    num_classes: int = 2
    n_labeled: int = 6
    n_reference: int = 56
    n_test: int = 20
    blobs_per_class: int = 2
    min_class_frac: float = 0.05
    max_class_frac: float = 0.25
    rare_classes: int = 0
    rare_min_frac: float = 0.004
    rare_max_frac: float = 0.02
    noise_level: float = 0.4
    texture_amp: float = 0.25
    intensity_jitter: float = 0.2
    contrast_range: tuple[float, float] = (0.65, 1.3)
    brightness_range: tuple[float, float] = (-0.1, 0.1)
    offset_range: tuple[float, float] = (-0.35, 0.35)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.n_labeled, self.n_reference, self.n_test) < 1:
            raise ValueError("set sizes n_labeled/n_reference/n_test must all be >= 1")
        if min(self.height, self.width) < 8:
            raise ValueError("height/width must be >= 8")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.blobs_per_class < 0:
            raise ValueError("blobs_per_class must be >= 0")
        if self.rare_classes < 0 or self.rare_classes > self.num_classes - 1:
            raise ValueError("rare_classes must lie in [0, num_classes-1]")
        for name in ("min_class_frac", "max_class_frac", "rare_min_frac", "rare_max_frac",
                     "noise_level", "texture_amp", "intensity_jitter"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
        if not (0.0 < self.min_class_frac < self.max_class_frac < 0.5):
            raise ValueError("need 0 < min_class_frac < max_class_frac < 0.5")
        if not (0.0 < self.rare_min_frac < self.rare_max_frac < 0.5):
            raise ValueError("need 0 < rare_min_frac < rare_max_frac < 0.5")
        common = self.num_classes - 1 - self.rare_classes
        budget = common * self.max_class_frac + self.rare_classes * self.rare_max_frac
        if budget > 0.85:
            raise ValueError(f"foreground frequency budget {budget:.2f} exceeds 0.85")
        for name in ("contrast_range", "brightness_range", "offset_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"{name} must be a finite (lo, hi) pair with lo <= hi")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for name in ("contrast_range", "brightness_range", "offset_range"):
            d[name] = list(getattr(self, name))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        kw = dict(d)
        for name in ("contrast_range", "brightness_range", "offset_range"):
            if name in kw:
                kw[name] = tuple(kw[name])
        spec = cls(**kw)
        spec.validate()
        return spec


@dataclass(frozen=True)
class ShiftSpec:
    """Parametric domain shift: intensity warp plus shape drift and anomalies.

    Documented ranges: intensity_scale in (0, 10], intensity_offset in
    [-5, 5], contrast_gamma in [0.25, 4], shape_drift in [-0.5, 1.0]
    (multiplies blob radii by 1+drift and regenerates ground truth),
    anomaly_rate in [0, 1], anomaly_magnitude in [-5, 5].
    """

    intensity_scale: float = 1.0
    intensity_offset: float = 0.0
    contrast_gamma: float = 1.0
    shape_drift: float = 0.0
    anomaly_rate: float = 0.0
    anomaly_magnitude: float = 1.5

    def validate(self) -> None:
        checks = [
            ("intensity_scale", 1e-6, 10.0),
            ("intensity_offset", -5.0, 5.0),
            ("contrast_gamma", 0.25, 4.0),
            ("shape_drift", -0.5, 1.0),
            ("anomaly_rate", 0.0, 1.0),
            ("anomaly_magnitude", -5.0, 5.0),
        ]
        for name, lo, hi in checks:
            v = getattr(self, name)
            if not np.isfinite(v) or not (lo <= v <= hi):
                raise ValueError(f"{name}={v} outside documented range [{lo}, {hi}]")

    @property
    def is_identity(self) -> bool:
        return (self.intensity_scale == 1.0 and self.intensity_offset == 0.0
                and self.contrast_gamma == 1.0 and self.shape_drift == 0.0
                and self.anomaly_rate == 0.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass(frozen=True)
class PartitionSpec:
    """Fixed bipartition of the reference set, drawn once per run."""

    subset1_ids: tuple[str, ...]
    subset2_ids: tuple[str, ...]
    seed: int

    def validate_against(self, reference_ids: list[str]) -> None:
        s1, s2 = set(self.subset1_ids), set(self.subset2_ids)
        if s1 & s2:
            raise ValueError("partition subsets overlap")
        if s1 | s2 != set(reference_ids):
            raise ValueError("partition does not cover the reference set")
        if abs(len(s1) - len(s2)) > 1:
            raise ValueError("partition subsets differ in size by more than 1")


class DatasetBundle:
    """Labeled set S, reference set R (truth hidden), test set E.

    Reference samples carry ``label=None``; their ground truth is reachable
    only through :meth:`reference_truth`, which is evaluation-scoped by
    convention and audited through the pseudo-label ledger.
    """

    def __init__(self, labeled, reference, test, num_classes, gen_spec,
                 seed, reference_truth):
        self.labeled: tuple[Sample, ...] = tuple(labeled)
        self.reference: tuple[Sample, ...] = tuple(reference)
        self.test: tuple[Sample, ...] = tuple(test)
        self.num_classes = int(num_classes)
        self.gen_spec = gen_spec
        self.seed = int(seed)
        self._reference_truth: dict[str, LabelMap] = dict(reference_truth)
        self._validate()

    def _validate(self) -> None:
        ids = [s.id for s in self.labeled + self.reference + self.test]
        if len(ids) != len(set(ids)):
            raise ValueError("sample ids are not unique across S/R/E")
        for s in self.reference:
            if s.label is not None:
                raise ValueError(f"reference sample {s.id} carries a training-visible label")
            if s.id not in self._reference_truth:
                raise ValueError(f"reference sample {s.id} has no hidden ground truth")
        for s in self.labeled + self.test:
            if s.label is None:
                raise ValueError(f"sample {s.id} is missing its label")

    @property
    def reference_ids(self) -> list[str]:
        return [s.id for s in self.reference]

    def reference_truth(self, sample_id: str) -> LabelMap:
        """Evaluation-scoped accessor to hidden reference ground truth."""
        return self._reference_truth[sample_id]

    def sample_by_id(self, sample_id: str) -> Sample:
        for s in self.labeled + self.reference + self.test:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


def _smooth_field(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Low-frequency noise: coarse normal grid, bilinearly upsampled."""
    gh = max(2, h // cell + 2)
    gw = max(2, w // cell + 2)
    grid = rng.normal(0.0, 1.0, size=(gh, gw))
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _class_bands(spec: GeneratorSpec) -> list[tuple[float, float]]:
    """Per-foreground-class guaranteed frequency band (index 1..K-1)."""
    bands = []
    n_common = spec.num_classes - 1 - spec.rare_classes
    for c in range(1, spec.num_classes):
        if c - 1 < n_common:
            bands.append((spec.min_class_frac, spec.max_class_frac))
        else:
            bands.append((spec.rare_min_frac, spec.rare_max_frac))
    return bands


def _blob_coverage(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Soft-edged blob: coverage 0.5 exactly at distance r, quartic falloff."""
    yy = np.arange(h)[:, None] - cy
    xx = np.arange(w)[None, :] - cx
    d2 = (yy * yy + xx * xx) / (r * r)
    return np.exp(-np.log(2.0) * d2 * d2)


def _draw_geometry(rng, spec: GeneratorSpec, radius_mult: float):
    """One rejection attempt at blob geometry; returns (label, coverage)."""
    h, w, k = spec.height, spec.width, spec.num_classes
    cov = np.zeros((k, h, w))
    bands = _class_bands(spec)
    for c in range(1, k):
        lo, hi = bands[c - 1]
        # aim inside the band so overlap losses rarely push us out of it
        target = rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo))
        n_blobs = spec.blobs_per_class
        if n_blobs == 0:
            continue
        weights = rng.uniform(0.6, 1.4, size=n_blobs)
        weights /= weights.sum()
        occupied = cov.max(axis=0) >= 0.5
        for bw in weights:
            r = float(np.sqrt(bw * target * h * w / np.pi)) * radius_mult
            r = max(r, 1.6)
            margin = min(r + 1.0, min(h, w) / 2.0 - 1.0)
            best = None
            best_overlap = None
            for _ in range(6):
                cy = rng.uniform(margin, h - 1 - margin)
                cx = rng.uniform(margin, w - 1 - margin)
                bump = _blob_coverage(h, w, cy, cx, r)
                overlap = int(np.count_nonzero((bump >= 0.5) & occupied))
                if best_overlap is None or overlap < best_overlap:
                    best, best_overlap = bump, overlap
                if overlap == 0:
                    break
            cov[c] = np.maximum(cov[c], best)
            occupied = occupied | (best >= 0.5)
    peak = cov.max(axis=0)
    label = np.where(peak >= 0.5, cov.argmax(axis=0), 0).astype(np.int32)
    return label, cov


def _gen_sample(spec: GeneratorSpec, seed: int, role: str, index: int,
                class_mu: np.ndarray, radius_mult: float = 1.0) -> tuple[Sample, LabelMap]:
    """Generate one sample; retries geometry until frequencies sit in band."""
    rng = rng_for(seed, "sample", role, index)
    h, w, k = spec.height, spec.width, spec.num_classes
    bands = _class_bands(spec)
    label = cov = None
    for _ in range(40):
        label, cov = _draw_geometry(rng, spec, radius_mult)
        freqs = np.bincount(label.ravel(), minlength=k) / (h * w)
        ok = all(lo <= freqs[c] <= hi for c, (lo, hi) in zip(range(1, k), bands))
        if spec.blobs_per_class == 0:
            ok = True
        if ok:
            break
    else:
        raise GenerationError(
            f"could not satisfy class frequency bands for sample {role}{index}")

    contrast = rng.uniform(*spec.contrast_range)
    brightness = rng.uniform(*spec.brightness_range)
    offset = rng.uniform(*spec.offset_range)
    peak = cov.max(axis=0)
    winner = cov.argmax(axis=0)
    img = np.empty((h, w, spec.channels))
    for ch in range(spec.channels):
        texture = _smooth_field(rng, h, w, cell=6) * spec.texture_amp
        signal = peak * class_mu[winner, ch]
        noise = rng.normal(0.0, 1.0, size=(h, w)) * spec.noise_level
        img[:, :, ch] = offset + texture + signal * contrast + brightness * peak + noise

    label_map = LabelMap(label, num_classes=k)
    sid = f"{role}{index:03d}"
    return Sample(sid, Image(img), label_map), label_map


def _class_intensities(spec: GeneratorSpec, seed: int) -> np.ndarray:
    """Per (class, channel) mean intensity, fixed per bundle."""
    rng = rng_for(seed, "classmu")
    k, c = spec.num_classes, spec.channels
    mu = np.zeros((k, c))
    base = np.linspace(0.8, 1.6, max(k - 1, 1))
    for ci in range(1, k):
        mu[ci] = base[ci - 1] * (1.0 + spec.intensity_jitter * rng.uniform(-1.0, 1.0, size=c))
    return mu


def gen_synthetic_task(spec: GeneratorSpec, seed: int) -> DatasetBundle:
    """Deterministically generate a bundle of S/R/E samples from (spec, seed)."""
    spec.validate()
    class_mu = _class_intensities(spec, seed)
    labeled, test = [], []
    reference, ref_truth = [], {}
    for i in range(spec.n_labeled):
        s, _ = _gen_sample(spec, seed, "S", i, class_mu)
        labeled.append(s)
    for i in range(spec.n_reference):
        s, truth = _gen_sample(spec, seed, "R", i, class_mu)
        reference.append(Sample(s.id, s.image, None, s.domain_tag))
        ref_truth[s.id] = truth
    for i in range(spec.n_test):
        s, _ = _gen_sample(spec, seed, "E", i, class_mu)
        test.append(s)
    return DatasetBundle(labeled, reference, test, spec.num_classes, spec, seed, ref_truth)


def _warp_image(data: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    out = data
    if shift.contrast_gamma != 1.0:
        out = np.sign(out) * np.abs(out) ** shift.contrast_gamma
    if shift.intensity_scale != 1.0:
        out = out * shift.intensity_scale
    if shift.intensity_offset != 0.0:
        out = out + shift.intensity_offset
    return out


def _insert_anomaly(rng, data: np.ndarray, magnitude: float) -> np.ndarray:
    h, w = data.shape[:2]
    r = rng.uniform(2.0, max(3.0, min(h, w) / 5.0))
    cy = rng.uniform(r, h - 1 - r)
    cx = rng.uniform(r, w - 1 - r)
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    bump = _blob_coverage(h, w, cy, cx, r)
    return data + (sign * magnitude) * bump[:, :, None]


def apply_domain_shift(bundle: DatasetBundle, shift: ShiftSpec, seed: int) -> DatasetBundle:
    """Shifted copy of a bundle: same structure and ids, target-domain stats.

    With zero shape drift the geometry (and ground truth) is carried over
    unchanged and only image statistics move; a nonzero drift regenerates
    each sample's blobs at drifted radii, with ground truth to match.
    """
    shift.validate()
    spec = bundle.gen_spec
    if shift.is_identity:
        tag = "target"
        labeled = [Sample(s.id, s.image, s.label, tag) for s in bundle.labeled]
        reference = [Sample(s.id, s.image, None, tag) for s in bundle.reference]
        test = [Sample(s.id, s.image, s.label, tag) for s in bundle.test]
        return DatasetBundle(labeled, reference, test, bundle.num_classes,
                             spec, bundle.seed, bundle._reference_truth)

    class_mu = _class_intensities(spec, bundle.seed)
    radius_mult = 1.0 + shift.shape_drift

    def shifted(sample: Sample, truth: LabelMap | None, role: str, index: int):
        if shift.shape_drift != 0.0:
            fresh, fresh_truth = _gen_sample(spec, derive_seed(seed, "drift"),
                                             role, index, class_mu, radius_mult)
            data, label = np.array(fresh.image.data), fresh_truth
        else:
            data = np.array(sample.image.data)
            label = truth if truth is not None else sample.label
        data = _warp_image(data, shift)
        arng = rng_for(seed, "anomaly", sample.id)
        if arng.uniform() < shift.anomaly_rate:
            data = _insert_anomaly(arng, data, shift.anomaly_magnitude)
        return data, label

    labeled, test = [], []
    reference, ref_truth = [], {}
    for i, s in enumerate(bundle.labeled):
        data, label = shifted(s, None, "S", i)
        labeled.append(Sample(s.id, Image(data), label, "target"))
    for i, s in enumerate(bundle.reference):
        data, label = shifted(s, bundle.reference_truth(s.id), "R", i)
        reference.append(Sample(s.id, Image(data), None, "target"))
        ref_truth[s.id] = label
    for i, s in enumerate(bundle.test):
        data, label = shifted(s, None, "E", i)
        test.append(Sample(s.id, Image(data), label, "target"))
    return DatasetBundle(labeled, reference, test, bundle.num_classes,
                         spec, bundle.seed, ref_truth)


def partition_reference(bundle: DatasetBundle, seed: int) -> PartitionSpec:
    """Balanced random bipartition of R, fixed for the whole run."""
    ids = bundle.reference_ids
    if len(ids) < 2:
        raise ValueError(f"reference set must have >= 2 samples, got {len(ids)}")
    rng = rng_for(seed, "partition")
    order = [ids[i] for i in rng.permutation(len(ids))]
    half = (len(ids) + 1) // 2
    spec = PartitionSpec(tuple(order[:half]), tuple(order[half:]), seed)
    spec.validate_against(ids)
    return spec


def save_mask(label: LabelMap, path) -> None:
    """Write a LabelMap in the bit-exact binary mask format."""
    if label.num_classes > 256:
        raise ValueError(f"mask format stores u8 classes; num_classes="
                         f"{label.num_classes} > 256")
    payload = label.data.astype(np.uint8).tobytes()
    header = MASK_MAGIC + struct.pack("<III", label.height, label.width, label.num_classes)
    Path(path).write_bytes(header + payload)


def load_mask(path) -> LabelMap:
    """Read a mask file, validating magic, dims and class indices."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise MaskFormatError(f"{path}: short read in field 'magic'")
    if raw[:8] != MASK_MAGIC:
        raise MaskFormatError(f"{path}: bad value in field 'magic'")
    if len(raw) < 20:
        raise MaskFormatError(f"{path}: short read in field 'dims'")
    h, w, k = struct.unpack("<III", raw[8:20])
    if k < 2 or k > 256:
        raise MaskFormatError(f"{path}: field 'num_classes'={k} outside [2, 256]")
    if len(raw) < 20 + h * w:
        raise MaskFormatError(f"{path}: short read in field 'data' "
                              f"(expected {h * w} bytes, got {len(raw) - 20})")
    data = np.frombuffer(raw[20:20 + h * w], dtype=np.uint8).reshape(h, w)
    if data.size and data.max() >= k:
        raise MaskFormatError(f"{path}: field 'data' holds class index "
                              f"{int(data.max())} >= num_classes={k}")
    return LabelMap(data.astype(np.int32), num_classes=int(k))


def save_bundle(bundle: DatasetBundle, out_dir) -> Path:
    """Persist a bundle: npy images, binary masks and a JSON manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    samples = []

    def dump(sample: Sample, role: str, truth: LabelMap | None):
        img_rel = f"images/{sample.id}.npy"
        np.save(out / img_rel, sample.image.data)
        entry = {"id": sample.id, "role": role, "domain_tag": sample.domain_tag,
                 "image": img_rel, "mask": None, "truth_mask": None}
        if sample.label is not None:
            entry["mask"] = f"masks/{sample.id}.msk"
            save_mask(sample.label, out / entry["mask"])
        if truth is not None:
            entry["truth_mask"] = f"masks/{sample.id}.truth.msk"
            save_mask(truth, out / entry["truth_mask"])
        samples.append(entry)

    for s in bundle.labeled:
        dump(s, "S", None)
    for s in bundle.reference:
        dump(s, "R", bundle.reference_truth(s.id))
    for s in bundle.test:
        dump(s, "E", None)
    manifest = {
        "format": "atso-bundle@1",
        "seed": bundle.seed,
        "num_classes": bundle.num_classes,
        "gen_spec": bundle.gen_spec.to_dict(),
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / "manifest.json"


def load_bundle(manifest_path) -> DatasetBundle:
    """Load a bundle written by :func:`save_bundle`."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "atso-bundle@1":
        raise ValueError(f"{path}: unknown manifest format {manifest.get('format')!r}")
    root = path.parent
    spec = GeneratorSpec.from_dict(manifest["gen_spec"])
    labeled, reference, test = [], [], []
    ref_truth = {}
    for entry in manifest["samples"]:
        img = Image(np.load(root / entry["image"]))
        label = load_mask(root / entry["mask"]) if entry["mask"] else None
        sample = Sample(entry["id"], img, label, entry["domain_tag"])
        if entry["role"] == "S":
            labeled.append(sample)
        elif entry["role"] == "E":
            test.append(sample)
        elif entry["role"] == "R":
            reference.append(sample)
            ref_truth[entry["id"]] = load_mask(root / entry["truth_mask"])
        else:
            raise ValueError(f"{path}: unknown sample role {entry['role']!r}")
    return DatasetBundle(labeled, reference, test, manifest["num_classes"],
                         spec, manifest["seed"], ref_truth)
