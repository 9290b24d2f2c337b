"""Training regimes over a bundle: continual self-learning, synchronous
teacher-student optimization (fresh student each generation) and the
asynchronous variant where the reference set is split once and each half is
always labelled by the model trained on the other half, with a final model
trained on the merged pseudo labels.

Every pseudo-label write lands in an append-only ledger carrying the
producer's training-data fingerprint, so the cross-subset rule and the
"training never sees reference ground truth" rule are machine-checkable
after the fact.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learners, metrics
from .data import DatasetBundle, LabelMap, PartitionSpec, Sample, partition_reference, save_mask
from .learners import ArchSpec, Hyper, InitPolicy, Model, TrainItem, TrainSet
from .metrics import ClassMapping, CrossEvalMatrix
from .util import derive_seed, fingerprint_bytes

MODES = ("self_learning", "stso", "atso")


@dataclass(frozen=True)
class LedgerRecord:
    """One pseudo-label write: who produced it, trained on what."""

    sample_id: str
    generation: int
    producer_model_id: str
    producer_init: str
    producer_train_ids: tuple[str, ...]
    producer_train_tags: tuple[str, ...]
    label_digest: str

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "generation": self.generation,
                "producer_model_id": self.producer_model_id,
                "producer_init": self.producer_init,
                "producer_train_ids": list(self.producer_train_ids),
                "producer_train_tags": list(self.producer_train_tags),
                "label_digest": self.label_digest}


@dataclass
class StoreEntry:
    label: LabelMap
    producer_model_id: str
    generation: int


class PseudoLabelStore:
    """Current pseudo label per sample plus the append-only write ledger."""

    def __init__(self):
        self.entries: dict[str, StoreEntry] = {}
        self.history: list[LedgerRecord] = []

    def write(self, sample_id: str, label: LabelMap, producer: Model,
              generation: int) -> None:
        self.entries[sample_id] = StoreEntry(label, producer.model_id, generation)
        prov = producer.provenance
        self.history.append(LedgerRecord(
            sample_id, generation, producer.model_id, prov.init_policy,
            prov.dataset_ids, prov.dataset_tags,
            fingerprint_bytes(label.data.tobytes())))

    def current_label(self, sample_id: str) -> LabelMap:
        return self.entries[sample_id].label

    def ledger_json(self) -> str:
        return json.dumps({
            "format": "atso-ledger@1",
            "current": {sid: {"producer": e.producer_model_id, "generation": e.generation}
                        for sid, e in sorted(self.entries.items())},
            "history": [r.to_dict() for r in self.history],
        }, indent=1, sort_keys=True)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for sid, entry in sorted(self.entries.items()):
            save_mask(entry.label, out / f"{sid}.msk")
        (out / "ledger.json").write_text(self.ledger_json())


@dataclass
class GenerationReport:
    t: int
    mode: str
    scores: dict[str, float]
    wall_time: float = 0.0
    phase: str = "gen"  # "gen" | "final"

    def __post_init__(self):
        for name, v in self.scores.items():
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"score {name}={v} outside [0, 1]")


@dataclass(frozen=True)
class RunSettings:
    """Everything a run needs besides the bundle, mode, T and seed."""

    arch: ArchSpec
    hyper: Hyper
    scratch_depth: int = 2  # 0: no reinit, 1: keep hidden layer of M0, 2: full
    eval_metric: str = "dice"
    loss_mapping: ClassMapping | None = None
    concurrent: bool = False
    extra_global_dsc: bool = False

    def __post_init__(self):
        if self.scratch_depth not in (0, 1, 2):
            raise ValueError(f"scratch_depth must be 0, 1 or 2, got {self.scratch_depth}")
        if self.eval_metric not in ("dice", "miou", "accuracy"):
            raise ValueError(f"unknown eval_metric {self.eval_metric!r}")


@dataclass
class RunState:
    mode: str
    bundle: DatasetBundle
    T: int
    settings: RunSettings
    seed: int
    t: int = 0
    partition: PartitionSpec | None = None
    models: dict[str, Model] = field(default_factory=dict)
    store: PseudoLabelStore = field(default_factory=PseudoLabelStore)
    reports: list[GenerationReport] = field(default_factory=list)
    matrices: list[CrossEvalMatrix] = field(default_factory=list)
    pending: dict[str, tuple[LabelMap, Model]] | None = None

    @property
    def init_seed(self) -> int:
        # constant per run: every fresh start uses the same initialized head,
        # while the SGD shuffle varies per training event
        return derive_seed(self.seed, "init")

    def train_seed(self, *tags) -> int:
        return derive_seed(self.seed, "train", *tags)


def _score(state: RunState, pred: LabelMap, truth: LabelMap) -> float:
    return metrics.score_maps(pred, truth, state.settings.eval_metric,
                              state.settings.loss_mapping)


def _eval_model(state: RunState, model: Model, samples, truths) -> float:
    vals = [_score(state, learners.predict(model, s.image)[0], t)
            for s, t in zip(samples, truths)]
    return float(np.mean(vals))


def _eval_on_test(state: RunState, model: Model) -> float:
    return _eval_model(state, model, state.bundle.test,
                       [s.label for s in state.bundle.test])


def _eval_on_reference(state: RunState, model: Model, ids=None) -> float:
    bundle = state.bundle
    ids = list(ids) if ids is not None else bundle.reference_ids
    samples = [bundle.sample_by_id(sid) for sid in ids]
    truths = [bundle.reference_truth(sid) for sid in ids]
    return _eval_model(state, model, samples, truths)


def _store_quality(state: RunState, labels: dict[str, LabelMap], ids=None) -> float:
    ids = list(ids) if ids is not None else list(labels)
    vals = [_score(state, labels[sid], state.bundle.reference_truth(sid)) for sid in ids]
    return float(np.mean(vals))


def _predict_labels(state: RunState, model: Model, ids) -> dict[str, LabelMap]:
    """Hard pseudo labels for the given reference samples, reduced to the
    coarse space when the run carries a loss mapping."""
    out = {}
    mapping = state.settings.loss_mapping
    for sid in ids:
        sample = state.bundle.sample_by_id(sid)
        label, _ = learners.predict(model, sample.image)
        if mapping is not None and not mapping.is_identity:
            label = metrics.reduce_classes(label, mapping)
        out[sid] = label
    return out


def _train_set(state: RunState, reference_ids) -> TrainSet:
    items = [TrainItem(s, s.label, "ground_truth") for s in state.bundle.labeled]
    for sid in reference_ids:
        sample = state.bundle.sample_by_id(sid)
        items.append(TrainItem(sample, state.store.current_label(sid), "pseudo"))
    return TrainSet(items, state.settings.loss_mapping)


def _student_init(state: RunState, teacher: Model) -> InitPolicy:
    depth = state.settings.scratch_depth
    if depth == 0:
        return InitPolicy.continued(teacher)
    if depth == 1:
        return InitPolicy.partial(state.models["M0"], state.init_seed)
    return InitPolicy.fresh(state.init_seed)


def train_initial(bundle: DatasetBundle, arch: ArchSpec, hyper: Hyper,
                  seed: int, init_seed: int | None = None) -> Model:
    """Initial model, trained from scratch on the labeled set only."""
    if not bundle.labeled:
        raise ValueError("labeled set is empty")
    items = [TrainItem(s, s.label, "ground_truth") for s in bundle.labeled]
    return learners.train(arch, TrainSet(items), InitPolicy.fresh(init_seed),
                          hyper, seed)


def init_run(mode: str, bundle: DatasetBundle, T: int, settings: RunSettings,
             seed: int) -> RunState:
    """Train the initial model and emit the generation-0 report."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if T < 0:
        raise ValueError("T must be >= 0")
    state = RunState(mode, bundle, T, settings, seed)
    t0 = time.perf_counter()
    m0 = train_initial(bundle, settings.arch, settings.hyper,
                       state.train_seed(0), state.init_seed)
    state.models["M0"] = m0
    scores = {"reference": _eval_on_reference(state, m0),
              "test": _eval_on_test(state, m0)}
    if mode == "atso":
        state.partition = partition_reference(bundle, derive_seed(seed, "partition"))
        state.models["G0.1"] = m0
        state.models["G0.2"] = m0
        scores["subset1"] = _eval_on_reference(state, m0, state.partition.subset1_ids)
        scores["subset2"] = _eval_on_reference(state, m0, state.partition.subset2_ids)
        state.matrices.append(metrics.cross_eval_matrix(
            {"1": m0, "2": m0}, state.partition, bundle, 0,
            metric=settings.eval_metric, mapping=settings.loss_mapping,
            test_model=m0))
    else:
        state.models["G0"] = m0
    if settings.extra_global_dsc and bundle.num_classes == 2:
        scores["global_dsc"] = _global_test_dsc(state, m0)
    state.reports.append(GenerationReport(0, mode, scores, time.perf_counter() - t0))
    return state


def _global_test_dsc(state: RunState, model: Model) -> float:
    preds = [learners.predict(model, s.image)[0] for s in state.bundle.test]
    truths = [s.label for s in state.bundle.test]
    return metrics.global_dsc(preds, truths)


def _teacher_round(state: RunState, continual: bool) -> RunState:
    """Shared body of the single-model rounds (self-learning and the
    synchronous from-scratch variant)."""
    if state.t >= state.T:
        raise ValueError(f"run already at final generation t={state.t}")
    t0 = time.perf_counter()
    g = state.t + 1
    teacher = state.models[f"G{state.t}"]
    for sid, label in _predict_labels(state, teacher, state.bundle.reference_ids).items():
        state.store.write(sid, label, teacher, g)
    init = (InitPolicy.continued(teacher) if continual
            else _student_init(state, teacher))
    student = learners.train(state.settings.arch,
                             _train_set(state, state.bundle.reference_ids),
                             init, state.settings.hyper, state.train_seed(g))
    state.models[f"G{g}"] = student
    state.t = g
    scores = {"reference": _eval_on_reference(state, student),
              "test": _eval_on_test(state, student)}
    if state.settings.extra_global_dsc and state.bundle.num_classes == 2:
        scores["global_dsc"] = _global_test_dsc(state, student)
    state.reports.append(GenerationReport(g, state.mode, scores,
                                          time.perf_counter() - t0))
    return state


def self_learning_round(state: RunState) -> RunState:
    """Pseudo-label all of R with the teacher, fine-tune the student from the
    teacher's weights."""
    if state.mode != "self_learning":
        raise ValueError(f"self_learning_round called in mode {state.mode!r}")
    return _teacher_round(state, continual=True)


def stso_round(state: RunState) -> RunState:
    """Same labelling schedule as self-learning, but the student trains from
    scratch (subject to scratch_depth)."""
    if state.mode != "stso":
        raise ValueError(f"stso_round called in mode {state.mode!r}")
    return _teacher_round(state, continual=False)


def _cross_predictions(state: RunState, m1: Model, m2: Model):
    """Labels under the cross-subset rule: subset 1 from the model trained on
    subset 2, and vice versa."""
    labels1 = _predict_labels(state, m2, state.partition.subset1_ids)
    labels2 = _predict_labels(state, m1, state.partition.subset2_ids)
    pending: dict[str, tuple[LabelMap, Model]] = {}
    for sid, lab in labels1.items():
        pending[sid] = (lab, m2)
    for sid, lab in labels2.items():
        pending[sid] = (lab, m1)
    return pending


def _train_merge(state: RunState, pending) -> Model:
    """Model trained fresh on S plus both subsets' current pseudo labels."""
    items = [TrainItem(s, s.label, "ground_truth") for s in state.bundle.labeled]
    for sid in state.bundle.reference_ids:
        if sid in pending:
            items.append(TrainItem(state.bundle.sample_by_id(sid), pending[sid][0],
                                   "pseudo"))
    return learners.train(state.settings.arch,
                          TrainSet(items, state.settings.loss_mapping),
                          InitPolicy.fresh(state.init_seed), state.settings.hyper,
                          state.train_seed(state.t, "merge"))


def atso_generation(state: RunState) -> RunState:
    """One asynchronous generation: write cross-subset labels from the
    teachers, train both subset students (possibly concurrently), then score
    the generation the way the per-generation tables do: the merged column
    holds the quality of the labels these new models produce, and the test
    column holds the score of a merge-trained model on those labels."""
    if state.mode != "atso":
        raise ValueError(f"atso_generation called in mode {state.mode!r}")
    if state.t >= state.T:
        raise ValueError(f"run already at final generation t={state.t}")
    t0 = time.perf_counter()
    g = state.t + 1
    for slot in ("1", "2"):
        if f"G{state.t}.{slot}" not in state.models:
            raise ValueError(f"generation {state.t}: missing subset model {slot}")
    m1 = state.models[f"G{state.t}.1"]
    m2 = state.models[f"G{state.t}.2"]

    if state.pending is None:
        state.pending = _cross_predictions(state, m1, m2)
    for sid, (label, producer) in sorted(state.pending.items()):
        state.store.write(sid, label, producer, g)

    init1 = _student_init(state, m1)
    init2 = _student_init(state, m2)
    arch, hyper = state.settings.arch, state.settings.hyper
    seed1, seed2 = state.train_seed(g, 1), state.train_seed(g, 2)
    set1 = _train_set(state, state.partition.subset1_ids)
    set2 = _train_set(state, state.partition.subset2_ids)
    if state.settings.concurrent:
        with ThreadPoolExecutor(max_workers=2) as pool:
            f1 = pool.submit(learners.train, arch, set1, init1, hyper, seed1)
            f2 = pool.submit(learners.train, arch, set2, init2, hyper, seed2)
            s1, s2 = f1.result(), f2.result()
    else:
        s1 = learners.train(arch, set1, init1, hyper, seed1)
        s2 = learners.train(arch, set2, init2, hyper, seed2)
    state.models[f"G{g}.1"] = s1
    state.models[f"G{g}.2"] = s2
    state.t = g

    state.pending = _cross_predictions(state, s1, s2)
    merge = _train_merge(state, state.pending)
    state.models[f"G{g}.merge"] = merge

    labels_only = {sid: lab for sid, (lab, _) in state.pending.items()}
    scores = {
        "reference": _store_quality(state, labels_only),
        "subset1": _store_quality(state, labels_only, state.partition.subset1_ids),
        "subset2": _store_quality(state, labels_only, state.partition.subset2_ids),
        "test": _eval_on_test(state, merge),
    }
    if state.settings.extra_global_dsc and state.bundle.num_classes == 2:
        scores["global_dsc"] = _global_test_dsc(state, merge)
    state.matrices.append(metrics.cross_eval_matrix(
        {"1": s1, "2": s2}, state.partition, state.bundle, g,
        metric=state.settings.eval_metric, mapping=state.settings.loss_mapping,
        test_model=merge))
    state.reports.append(GenerationReport(g, state.mode, scores,
                                          time.perf_counter() - t0))
    return state


def final_merge_train(state: RunState) -> Model:
    """Write the last cross-subset labels and train the returned model on
    S plus both subsets' stores."""
    if state.mode != "atso":
        raise ValueError("final_merge_train only applies to atso runs")
    if state.t != state.T:
        raise ValueError(f"final_merge_train called at t={state.t}, expected T={state.T}")
    t0 = time.perf_counter()
    if state.pending is not None:
        for sid, (label, producer) in sorted(state.pending.items()):
            state.store.write(sid, label, producer, state.T + 1)
        final = state.models.get(f"G{state.T}.merge")
        if final is None:
            final = _train_merge(state, state.pending)
        reference = _store_quality(state, {sid: lab for sid, (lab, _)
                                           in state.pending.items()})
    else:
        # T=0: the loop never ran, the store is empty, merge trains on S only
        final = _train_merge(state, {})
        reference = state.reports[0].scores["reference"]
    state.models["final"] = final
    scores = {"reference": reference, "test": _eval_on_test(state, final)}
    if state.settings.extra_global_dsc and state.bundle.num_classes == 2:
        scores["global_dsc"] = _global_test_dsc(state, final)
    state.reports.append(GenerationReport(state.t, state.mode, scores,
                                          time.perf_counter() - t0, phase="final"))
    return final


@dataclass
class RunReport:
    mode: str
    seed: int
    T: int
    reports: list[GenerationReport]
    matrices: list[CrossEvalMatrix]
    final_model: Model
    store: PseudoLabelStore
    partition: PartitionSpec | None
    models: dict[str, Model]


def run(mode: str, bundle: DatasetBundle, T: int, settings: RunSettings,
        seed: int) -> RunReport:
    """Full run of one regime: initial training, T rounds, final model."""
    state = init_run(mode, bundle, T, settings, seed)
    step = {"self_learning": self_learning_round, "stso": stso_round,
            "atso": atso_generation}[mode]
    for _ in range(T):
        try:
            step(state)
        except Exception as err:
            raise RuntimeError(f"{mode} failed at generation {state.t + 1}: {err}") from err
    if mode == "atso":
        final = final_merge_train(state)
    else:
        final = state.models[f"G{state.T}"]
        state.models["final"] = final
    return RunReport(mode, seed, T, state.reports, state.matrices, final,
                     state.store, state.partition, state.models)


def make_transfer_bundle(source: DatasetBundle, target: DatasetBundle) -> DatasetBundle:
    """Labeled pool from the source domain; reference and test sets from the
    shifted target domain."""
    if source.num_classes != target.num_classes:
        raise ValueError("source and target bundles disagree on num_classes")
    labeled = [Sample(f"src_{s.id}", s.image, s.label, s.domain_tag)
               for s in source.labeled]
    truth = {s.id: target.reference_truth(s.id) for s in target.reference}
    return DatasetBundle(labeled, target.reference, target.test,
                         target.num_classes, target.gen_spec, target.seed, truth)


def run_transfer(source: DatasetBundle, target: DatasetBundle, mode: str, T: int,
                 settings: RunSettings, seed: int) -> RunReport:
    """Domain-transfer run: the initial model trains on the full labeled
    source pool, self-training adapts on the unlabeled target reference set,
    and the test report additionally carries the concatenated-volume Dice."""
    bundle = make_transfer_bundle(source, target)
    if not settings.extra_global_dsc and bundle.num_classes == 2:
        settings = dataclasses.replace(settings, extra_global_dsc=True)
    return run(mode, bundle, T, settings, seed)


def dataset_iou(model: Model, samples, truths, num_classes: int):
    """Class-wise IoU from the confusion aggregated over all samples, plus
    the mean over classes present anywhere (NaN marks absent classes)."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for sample, truth in zip(samples, truths):
        pred, _ = learners.predict(model, sample.image)
        cm += metrics.confusion(pred, truth)
    inter = np.diag(cm).astype(np.float64)
    union = (cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)).astype(np.float64)
    per = np.full(num_classes, np.nan)
    present = union > 0
    per[present] = inter[present] / union[present]
    mean = float(per[present].mean()) if present.any() else 0.0
    return per, mean


@dataclass
class ReducedProtocolReport:
    """Row set shaped like the class-reduction comparison table: direct
    transfer, plain full-class runs, reduced-space stage-1 runs, and the
    staged fine-tune, all scored as class-wise IoU on the target test set."""

    mapping: ClassMapping
    rows: dict[str, dict]          # tag -> {"per_class": [...], "miou": float}
    runs: dict[str, RunReport]
    stage2_store: PseudoLabelStore


def _stage2_finetune(bundle: DatasetBundle, start: Model, settings: RunSettings,
                     seed: int, rounds: int, init_kind: str, store: PseudoLabelStore,
                     first_generation: int) -> Model:
    """Fine-tune on full-class pseudo labels produced by the current model."""
    plain = dataclasses.replace(settings, loss_mapping=None)
    current = start
    for r in range(rounds):
        g = first_generation + r
        items = [TrainItem(s, s.label, "ground_truth") for s in bundle.labeled]
        for sid in bundle.reference_ids:
            sample = bundle.sample_by_id(sid)
            label, _ = learners.predict(current, sample.image)
            store.write(sid, label, current, g)
            items.append(TrainItem(sample, label, "pseudo"))
        init = (InitPolicy.continued(current) if init_kind == "continued"
                else InitPolicy.fresh(derive_seed(seed, "init")))
        current = learners.train(plain.arch, TrainSet(items), init, plain.hyper,
                                 derive_seed(seed, "train", "stage2", init_kind, r))
    return current


def run_reduced_class_protocol(source: DatasetBundle, target: DatasetBundle,
                               mapping: ClassMapping, stage1_T: int,
                               settings: RunSettings, seed: int,
                               stage2_T: int = 1,
                               stage2_init: str = "continued") -> ReducedProtocolReport:
    """Two-stage transfer for many-class tasks with fragile rare classes.

    Stage 1 runs the synchronous and asynchronous regimes twice: once in the
    full class space and once with pseudo labels and losses reduced through
    ``mapping`` (the labeled source items keep their fine classes, which is
    what lets stage 2 recover them). Stage 2 takes the reduced asynchronous
    model, generates full-class pseudo labels with it, and fine-tunes.
    """
    if mapping.source_classes != source.num_classes:
        raise ValueError(f"mapping source space {mapping.source_classes} != task "
                         f"classes {source.num_classes}")
    if stage2_init not in ("continued", "fresh", "both"):
        raise ValueError(f"stage2_init must be continued/fresh/both, got {stage2_init!r}")
    bundle = make_transfer_bundle(source, target)
    k = bundle.num_classes
    test_truths = [s.label for s in bundle.test]

    runs: dict[str, RunReport] = {}
    rows: dict[str, dict] = {}

    def add_row(tag: str, model: Model):
        per, mean = dataset_iou(model, bundle.test, test_truths, k)
        rows[tag] = {"per_class": [None if np.isnan(v) else float(v) for v in per],
                     "miou": mean}

    plain = dataclasses.replace(settings, loss_mapping=None, eval_metric="miou")
    reduced = dataclasses.replace(settings, loss_mapping=mapping, eval_metric="miou")

    m0 = train_initial(bundle, settings.arch, settings.hyper,
                       derive_seed(seed, "train", 0), derive_seed(seed, "init"))
    add_row("transfer", m0)
    for mode, tag in (("stso", f"STSO_{k}"), ("atso", f"ATSO_{k}")):
        runs[tag] = run(mode, bundle, stage1_T, plain, seed)
        add_row(tag, runs[tag].final_model)
    kt = mapping.target_classes
    for mode, tag in (("stso", f"STSO_{kt}"), ("atso", f"ATSO_{kt}")):
        runs[tag] = run(mode, bundle, stage1_T, reduced, seed)
        add_row(tag, runs[tag].final_model)

    stage2_store = PseudoLabelStore()
    staged_tag = f"ATSO_{kt}to{k}"
    start = runs[f"ATSO_{kt}"].final_model
    inits = ["continued", "fresh"] if stage2_init == "both" else [stage2_init]
    for kind in inits:
        final = _stage2_finetune(bundle, start, settings, seed, stage2_T, kind,
                                 stage2_store, stage1_T + 2)
        tag = staged_tag if kind == inits[0] else f"{staged_tag}_fresh"
        add_row(tag, final)
    return ReducedProtocolReport(mapping, rows, runs, stage2_store)


def audit_cross_subset(report: RunReport) -> list[str]:
    """Violations of the cross-subset rule: a ledger entry whose producer was
    trained on any sample of the subset it labelled. Empty list = clean."""
    if report.partition is None:
        return []
    side = {}
    for sid in report.partition.subset1_ids:
        side[sid] = set(report.partition.subset1_ids)
    for sid in report.partition.subset2_ids:
        side[sid] = set(report.partition.subset2_ids)
    violations = []
    for rec in report.store.history:
        own = side.get(rec.sample_id)
        if own is None:
            continue
        overlap = own & set(rec.producer_train_ids)
        if overlap:
            violations.append(
                f"gen {rec.generation}: label for {rec.sample_id} produced by "
                f"{rec.producer_model_id} trained on same-subset ids {sorted(overlap)[:4]}")
    return violations


def audit_training_scope(report: RunReport, bundle: DatasetBundle) -> list[str]:
    """Violations of the hidden-truth rule: any producer fingerprint claiming
    ground-truth supervision on a reference id."""
    labeled_ids = {s.id for s in bundle.labeled}
    violations = []
    seen = set()
    for rec in report.store.history:
        key = (rec.producer_model_id,)
        if key in seen:
            continue
        seen.add(key)
        for sid, tag in zip(rec.producer_train_ids, rec.producer_train_tags):
            if tag == "ground_truth" and sid not in labeled_ids:
                violations.append(f"model {rec.producer_model_id} claims ground truth "
                                  f"for non-labeled sample {sid}")
    for model in report.models.values():
        for sid, tag in zip(model.provenance.dataset_ids, model.provenance.dataset_tags):
            if tag == "ground_truth" and sid not in labeled_ids:
                violations.append(f"model {model.model_id} claims ground truth "
                                  f"for non-labeled sample {sid}")
    return violations
