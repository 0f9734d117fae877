"""Three-phase training loop: source-only, domain-adversarial, teacher-student.

Every random draw comes from a stream keyed by ``(seed, epoch, stream)``, so a
run resumed from the checkpoint written after epoch ``e`` continues bitwise
identically to an uninterrupted run. Runs whose configs agree on everything
that matters before epoch ``e`` can therefore share that prefix.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import losses
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, prefixed, save_checkpoint
from .data import PairedBatches, SignalDataset, iterations_per_epoch
from .nets import DomainClassifier, Student, Teacher, build_models, ema_update
from .optim import AdamState, SamConfig, adam_step, collect_grads, grl_coefficient, lr_at_epoch, sam_step, zero_grads
from .pseudolabel import (
    PseudoLabelEpochStats,
    ThresholdState,
    select_pseudo_labels,
    update_thresholds,
    write_stats_csv,
)

DROPOUT_STREAM = 3
SAM_DROPOUT_STREAM = 4
EVAL_CHUNK = 128


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    total_epochs: int = 300
    batch_size: int = 64
    t_da: int = 50
    t_pl: int = 50
    t_cal: int = 150
    tau: float = 0.9
    ema_alpha: float = 0.999
    base_lr: float = 1e-3
    lr_drop_epochs: tuple[int, ...] = (150, 250)
    lr_drop_factor: float = 10.0
    weight_decay: float = 1e-5
    calibrator_kind: str = "temperature"
    mcc_enabled: bool = False
    mcc_temperature: float = 2.5
    sdat_enabled: bool = False
    sam_rho: float = 0.05
    dropout: float = 0.5
    n_bins: int = 10
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_epochs: tuple[int, ...] = ()

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        self.checkpoint_epochs = tuple(int(e) for e in self.checkpoint_epochs)
        self.validate()

    def validate(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not 0 <= self.t_da <= self.t_pl <= self.t_cal <= self.total_epochs:
            raise ConfigError(
                "phase epochs must satisfy 0 <= t_da <= t_pl <= t_cal <= total_epochs "
                f"(got t_da={self.t_da}, t_pl={self.t_pl}, t_cal={self.t_cal}, total_epochs={self.total_epochs})"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigError("ema_alpha must lie in [0, 1]")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("base_lr must be positive and weight_decay non-negative")
        if self.calibrator_kind not in cal.KINDS:
            raise ConfigError(f"calibrator_kind must be one of {cal.KINDS}")
        if self.sdat_enabled and self.sam_rho <= 0:
            raise ConfigError("sam_rho must be positive when sdat is enabled")
        if self.mcc_temperature <= 0:
            raise ConfigError("mcc_temperature must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def phase(self, epoch: int) -> int:
        if epoch < self.t_da:
            return 1
        return 2 if epoch < self.t_pl else 3

    def calibration_active(self, epoch: int) -> bool:
        return epoch >= self.t_cal and epoch >= self.t_pl and self.calibrator_kind != "identity"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        d["checkpoint_epochs"] = list(self.checkpoint_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        return cls(**d)


# fields that only steer output cadence, never the trajectory
_NON_TRAJECTORY = {"checkpoint_every", "checkpoint_epochs", "n_bins"}


def shares_prefix(a: TrainerConfig, b: TrainerConfig, epoch: int) -> list[str]:
    """Fields on which ``a`` and ``b`` could diverge before ``epoch``; empty when the prefix is shared."""
    diffs = []
    for f in dataclasses.fields(TrainerConfig):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if f.name in _NON_TRAJECTORY or va == vb:
            continue
        if f.name in ("t_da", "t_pl", "t_cal") and min(va, vb) >= epoch:
            continue
        # the loss terms and the adversarial ramp only exist from t_da on
        if f.name in ("mcc_enabled", "mcc_temperature", "total_epochs") and min(a.t_da, b.t_da) >= epoch:
            continue
        if f.name == "calibrator_kind" and min(a.t_cal, b.t_cal) >= epoch:
            continue
        if f.name in ("tau", "ema_alpha") and min(a.t_pl, b.t_pl) >= epoch:
            continue
        diffs.append(f.name)
    return diffs


@dataclass
class MetricsRecord:
    epoch: int
    phase: int
    model: str
    source_test_acc: float
    target_test_acc: float
    source_ece: float
    target_ece: float
    n_pseudo_selected: int | None
    pseudo_label_acc: float | None
    l_c: float
    l_pl: float
    l_dc: float
    l_mcc: float
    total: float
    current_lr: float
    grl_lambda: float
    calibrator: str
    temperature: float
    seconds: float


METRIC_FIELDS = [f.name for f in dataclasses.fields(MetricsRecord)]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, history: list[MetricsRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in history:
            w.writerow([_cell(getattr(r, k)) for k in METRIC_FIELDS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {}
        for k, v in row.items():
            if v == "":
                parsed[k] = None
            elif k in ("epoch", "phase", "n_pseudo_selected"):
                parsed[k] = int(v)
            elif k in ("model", "calibrator"):
                parsed[k] = v
            else:
                parsed[k] = float(v)
        out.append(parsed)
    return out


def progress_p(epoch: int, iteration: int, config: TrainerConfig, iters_per_epoch: int) -> float:
    """Share of the adversarial span [t_da, total_epochs) already covered, in [0, 1]."""
    if epoch < config.t_da:
        raise ValueError(f"no adversarial progress before epoch {config.t_da} (got epoch {epoch})")
    total = (config.total_epochs - config.t_da) * iters_per_epoch
    idx = (epoch - config.t_da) * iters_per_epoch + iteration
    return min(max(idx / max(total - 1, 1), 0.0), 1.0)


# -- evaluation -----------------------------------------------------------------------

def predict_logits(model: Student | Teacher, samples: np.ndarray) -> np.ndarray:
    if isinstance(model, Teacher):
        net = model.model
    else:
        net = model
    was_training = net.training
    net.eval()
    out = []
    with T.no_grad():
        for lo in range(0, len(samples), EVAL_CHUNK):
            x = samples[lo:lo + EVAL_CHUNK]
            _, logits = net(T.Tensor(x.reshape(len(x), 1, -1)))
            out.append(logits.data)
    net.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


def encoder_features(model: Student | Teacher, samples: np.ndarray) -> np.ndarray:
    net = model.model if isinstance(model, Teacher) else model
    was_training = net.training
    net.eval()
    out = []
    with T.no_grad():
        for lo in range(0, len(samples), EVAL_CHUNK):
            x = samples[lo:lo + EVAL_CHUNK]
            out.append(net.encoder(T.Tensor(x.reshape(len(x), 1, -1))).data)
    net.train(was_training)
    return np.concatenate(out)


def evaluate(model, dataset: SignalDataset, calibrator: cal.CalibratorParams | None = None,
             n_bins: int = 10) -> tuple[float, cal.EceReport]:
    """Eval-mode accuracy and ECE, on calibrated probabilities when a calibrator is given."""
    if not dataset.has_labels:
        raise ValueError("evaluate needs a labelled dataset")
    logits = predict_logits(model, dataset.samples)
    preds = cal.apply_calibrator(logits, calibrator or cal.CalibratorParams(), dataset.labels)
    return preds.accuracy, cal.compute_ece(preds, n_bins)


def fit_calibrator(kind: str, teacher: Teacher, student: Student, source_test: SignalDataset,
                   source_train: SignalDataset, target_train: SignalDataset) -> cal.CalibratorParams:
    if kind == "identity":
        return cal.CalibratorParams()
    logits = predict_logits(teacher, source_test.samples)
    y = source_test.labels
    if kind == "temperature":
        return cal.fit_temperature(logits, y)
    if kind == "vector":
        return cal.fit_vector_scaling(logits, y)
    if kind == "matrix":
        return cal.fit_matrix_scaling(logits, y)
    return cal.fit_cpcs(
        logits, y,
        encoder_features(student, source_test.samples),
        encoder_features(student, source_train.samples),
        encoder_features(student, target_train.samples),
    )


# -- state --------------------------------------------------------------------------

@dataclass
class TrainingState:
    student: Student
    disc: DomainClassifier
    optimizer: AdamState
    teacher: Teacher | None = None
    calibrator: cal.CalibratorParams = field(default_factory=cal.CalibratorParams)
    next_epoch: int = 0
    history: list[MetricsRecord] = field(default_factory=list)
    pl_stats: list[PseudoLabelEpochStats] = field(default_factory=list)

    def params(self) -> dict[str, T.Tensor]:
        p = self.student.named_parameters()
        p.update(self.disc.named_parameters("domain_classifier."))
        return p

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.student.state_dict())
        out.update(prefixed("domain_classifier", self.disc.state_dict()))
        if self.teacher is not None:
            tstate = self.teacher.state_dict()
            out.update({"teacher_" + k: v for k, v in tstate.items()})
        out.update(cal.save_calibrator_arrays(self.calibrator))
        return out


def initial_state(config: TrainerConfig, n_classes: int) -> TrainingState:
    student, disc = build_models(n_classes, config.seed, config.dropout)
    opt = AdamState(learning_rate=config.base_lr, weight_decay=config.weight_decay)
    return TrainingState(student, disc, opt)


def save_state(path, state: TrainingState, config: TrainerConfig, n_classes: int):
    meta = {
        "config": config.to_dict(),
        "n_classes": n_classes,
        "next_epoch": state.next_epoch,
        "has_teacher": state.teacher is not None,
        "calibrator_kind": state.calibrator.kind,
        "history": [dataclasses.asdict(r) for r in state.history],
        "pl_stats": [
            {**dataclasses.asdict(s), "thresholds": [float(t) for t in s.thresholds]} for s in state.pl_stats
        ],
    }
    save_checkpoint(path, state.tensors(), meta, state.optimizer)


def restore_state(ckpt: Checkpoint, config: TrainerConfig) -> TrainingState:
    meta = ckpt.metadata
    n_classes = meta["n_classes"]
    state = initial_state(config, n_classes)
    student_state = {k: v for k, v in ckpt.tensors.items() if k.startswith(("encoder.", "classifier."))}
    state.student.load_state_dict(student_state)
    state.disc.load_state_dict(ckpt.group("domain_classifier"))
    if meta["has_teacher"]:
        state.teacher = Teacher(state.student, config.ema_alpha)
        state.teacher.load_state_dict(
            {k[len("teacher_"):]: v for k, v in ckpt.tensors.items() if k.startswith("teacher_")}
        )
    calib = {k: v for k, v in ckpt.tensors.items() if k.startswith("calibrator.")}
    state.calibrator = cal.load_calibrator_arrays(meta["calibrator_kind"], calib)
    opt = ckpt.optimizer
    state.optimizer = AdamState(
        learning_rate=opt.learning_rate, beta1=opt.beta1, beta2=opt.beta2,
        weight_decay=opt.weight_decay, eps=opt.eps, step_count=opt.step_count,
        m=opt.m, v=opt.v, steps=opt.steps,
    )
    state.next_epoch = meta["next_epoch"]
    state.history = [MetricsRecord(**r) for r in meta["history"]]
    state.pl_stats = [
        PseudoLabelEpochStats(**{**s, "thresholds": np.asarray(s["thresholds"])}) for s in meta["pl_stats"]
    ]
    return state


# -- training ------------------------------------------------------------------------

@dataclass
class TrainingResult:
    state: TrainingState
    history: list[MetricsRecord]
    checkpoint_path: Path | None
    run_dir: Path | None


class _EpochTotals:
    def __init__(self):
        self.sums = {"l_c": 0.0, "l_pl": 0.0, "l_dc": 0.0, "l_mcc": 0.0, "total": 0.0}
        self.n = 0

    def add(self, bundle: losses.LossBundle):
        for k in self.sums:
            self.sums[k] += getattr(bundle, k)
        self.n += 1

    def means(self) -> dict[str, float]:
        return {k: v / max(self.n, 1) for k, v in self.sums.items()}


def _check_inputs(source_train, source_test, target_train, target_test):
    for name, ds in (("source_train", source_train), ("source_test", source_test), ("target_test", target_test)):
        if not ds.has_labels:
            raise ConfigError(f"{name} must be labelled")
    lengths = {ds.length for ds in (source_train, source_test, target_train, target_test)}
    if len(lengths) != 1:
        raise ConfigError(f"datasets disagree on sample length: {sorted(lengths)}")
    k = max(source_train.n_classes or 0, source_test.n_classes or 0, target_test.n_classes or 0)
    if k < 2:
        raise ConfigError("need at least two classes")
    return k


def run_training(
    config: TrainerConfig,
    source_train: SignalDataset,
    source_test: SignalDataset,
    target_train: SignalDataset,
    target_test: SignalDataset,
    run_dir=None,
    resume_from=None,
    stop_after: int | None = None,
    log=None,
) -> TrainingResult:
    """Train per the three-phase schedule and evaluate after every epoch.

    Target-train labels never reach the training path: the unlabelled copy is
    trained on, and the labels are held aside to score pseudo-labels.
    ``stop_after`` ends the run after that many epochs (for prefix runs).
    """
    config.validate()
    n_classes = _check_inputs(source_train, source_test, target_train, target_test)
    target_truth = target_train.labels
    target_train = target_train.without_labels()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        saved_cfg = TrainerConfig.from_dict(ckpt.metadata["config"])
        resume_epoch = ckpt.metadata["next_epoch"]
        diffs = shares_prefix(saved_cfg, config, resume_epoch)
        if diffs:
            raise ConfigError(f"cannot resume at epoch {resume_epoch}: configs differ in {diffs}")
        if ckpt.metadata["n_classes"] != n_classes:
            raise ConfigError("checkpoint class count does not match the data")
        state = restore_state(ckpt, config)
    else:
        state = initial_state(config, n_classes)

    last = config.total_epochs if stop_after is None else min(stop_after, config.total_epochs)
    ipe = iterations_per_epoch(len(source_train), len(target_train), config.batch_size)
    ckpt_path = None
    for epoch in range(state.next_epoch, last):
        t0 = time.perf_counter()
        record = _train_epoch(state, config, epoch, ipe, n_classes, source_train, source_test,
                              target_train, target_truth)
        _evaluate_epoch(state, config, epoch, record, source_test, target_test)
        record.seconds = time.perf_counter() - t0
        state.history.append(record)
        state.next_epoch = epoch + 1
        if log is not None:
            log(record)
        if run_dir is not None:
            write_metrics_csv(run_dir / "metrics.csv", state.history)
            if state.pl_stats:
                write_stats_csv(run_dir / "pseudo_label_stats.csv", state.pl_stats, n_classes)
            done = epoch + 1
            if done in config.checkpoint_epochs or (config.checkpoint_every and done % config.checkpoint_every == 0):
                save_state(run_dir / f"checkpoint_epoch{done:04d}.ckpt", state, config, n_classes)

    if run_dir is not None:
        if not (run_dir / "pseudo_label_stats.csv").exists():
            write_stats_csv(run_dir / "pseudo_label_stats.csv", state.pl_stats, n_classes)
        write_metrics_csv(run_dir / "metrics.csv", state.history)
        model = state.teacher or state.student
        for name, ds in (("source", source_test), ("target", target_test)):
            preds = cal.apply_calibrator(predict_logits(model, ds.samples), state.calibrator, ds.labels)
            cal.write_reliability_csv(cal.reliability_path(run_dir, name), cal.reliability_rows(preds, config.n_bins))
        ckpt_path = run_dir / ("checkpoint_final.ckpt" if state.next_epoch == config.total_epochs
                               else f"checkpoint_epoch{state.next_epoch:04d}.ckpt")
        save_state(ckpt_path, state, config, n_classes)
    return TrainingResult(state, state.history, ckpt_path, run_dir)


def _train_epoch(state: TrainingState, config: TrainerConfig, epoch: int, ipe: int, n_classes: int,
                 source_train: SignalDataset, source_test: SignalDataset, target_train: SignalDataset,
                 target_truth) -> MetricsRecord:
    phase = config.phase(epoch)
    lr = lr_at_epoch(config.base_lr, epoch, config.lr_drop_epochs, config.lr_drop_factor)
    state.optimizer.learning_rate = lr
    student, disc = state.student, state.disc
    params = state.params()
    student_params = student.named_parameters()

    thresholds: ThresholdState | None = None
    if phase == 3:
        if state.teacher is None:
            state.teacher = Teacher(student, config.ema_alpha)
        if config.calibration_active(epoch):
            state.calibrator = fit_calibrator(config.calibrator_kind, state.teacher, student,
                                              source_test, source_train, target_train)
        probs = cal.apply_calibrator(predict_logits(state.teacher, target_train.samples), state.calibrator).probs
        thresholds = update_thresholds(probs, config.tau)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, DROPOUT_STREAM]))
    sam_rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, SAM_DROPOUT_STREAM]))
    sam_cfg = SamConfig(config.sam_rho, config.sdat_enabled)
    totals = _EpochTotals()
    lam = 0.0
    selected_idx, selected_lab, selected_conf = [], [], []

    student.train()
    disc.train()
    for it, (si, ti) in enumerate(PairedBatches(len(source_train), len(target_train), config.batch_size,
                                                config.seed, epoch)):
        xs = source_train.as_batch(si)
        ys = source_train.labels[si]
        xt = target_train.as_batch(ti)
        bs = len(si)
        if phase >= 2:
            lam = grl_coefficient(progress_p(epoch, it, config, ipe))

        pl = None
        if phase == 3:
            tprobs = cal.apply_calibrator(state.teacher.predict(xt), state.calibrator).probs
            pl = select_pseudo_labels(tprobs, thresholds, epoch)
            selected_idx.append(ti[pl.indices])
            selected_lab.append(pl.labels)
            selected_conf.append(pl.confidences)

        bundle_box = {}

        def full_loss():
            if phase == 1:
                _, logits_s = student(T.Tensor(xs), rng)
                terms = {"l_c": losses.cross_entropy(T.softmax(logits_s, axis=1), ys)}
                graph, bundle = losses.cat_total_loss(terms, {"l_c": True})
            else:
                feats, logits = student(T.Tensor(np.concatenate([xs, xt])), rng)
                logits_s, logits_t = logits[:bs], logits[bs:]
                d = disc(feats, lam, rng)
                terms = {
                    "l_c": losses.cross_entropy(T.softmax(logits_s, axis=1), ys),
                    "l_dc": losses.domain_bce(d[:bs], d[bs:]),
                }
                flags = {"l_c": True, "l_dc": True}
                if config.mcc_enabled:
                    terms["l_mcc"] = losses.mcc_loss(logits_t, config.mcc_temperature)
                    flags["l_mcc"] = True
                if pl is not None:
                    flags["l_pl"] = True
                    if len(pl):
                        sel = logits_t[pl.indices]
                        terms["l_pl"] = losses.pseudo_label_loss(T.softmax(sel, axis=1), pl.labels)
                graph, bundle = losses.cat_total_loss(terms, flags)
            bundle_box["bundle"] = bundle
            return graph

        def task_loss():
            # probing pass for the ascent direction: leave BN running stats untouched
            saved = {k: v.copy() for k, v in student.named_buffers().items()}
            _, logits_s = student(T.Tensor(xs), sam_rng)
            loss = losses.cross_entropy(T.softmax(logits_s, axis=1), ys)
            for k, v in student.named_buffers().items():
                v[...] = saved[k]
            return loss

        if sam_cfg.enabled:
            sam_step(task_loss, full_loss, params, sam_cfg, state.optimizer, perturb=student_params)
        else:
            zero_grads(params)
            loss = full_loss()
            loss.backward()
            adam_step(params, collect_grads(params), state.optimizer)
            zero_grads(params)
        bundle = bundle_box["bundle"]
        if not all(math.isfinite(v) for v in dataclasses.astuple(bundle)):
            raise TrainingError(f"non-finite loss at epoch {epoch}, iteration {it}: {bundle}")
        totals.add(bundle)
        if phase == 3:
            ema_update(state.teacher, student)

    means = totals.means()
    n_sel = pl_acc = None
    if phase == 3:
        idx = np.concatenate(selected_idx)
        labs = np.concatenate(selected_lab)
        confs = np.concatenate(selected_conf)
        n_sel = int(idx.size)
        if n_sel and target_truth is not None:
            pl_acc = float(np.mean(labs == target_truth[idx]))
        state.pl_stats.append(PseudoLabelEpochStats(
            epoch, n_sel, pl_acc, float(confs.mean()) if n_sel else None, thresholds.thresholds.copy()))
    return MetricsRecord(
        epoch=epoch, phase=phase, model="teacher" if state.teacher is not None else "student",
        source_test_acc=math.nan, target_test_acc=math.nan, source_ece=math.nan, target_ece=math.nan,
        n_pseudo_selected=n_sel, pseudo_label_acc=pl_acc,
        l_c=means["l_c"], l_pl=means["l_pl"], l_dc=means["l_dc"], l_mcc=means["l_mcc"], total=means["total"],
        current_lr=lr, grl_lambda=lam, calibrator=state.calibrator.kind,
        temperature=state.calibrator.temperature, seconds=0.0,
    )


def _evaluate_epoch(state: TrainingState, config: TrainerConfig, epoch: int, record: MetricsRecord,
                    source_test: SignalDataset, target_test: SignalDataset):
    model = state.teacher if state.teacher is not None else state.student
    src_acc, src_ece = evaluate(model, source_test, state.calibrator, config.n_bins)
    tgt_acc, tgt_ece = evaluate(model, target_test, state.calibrator, config.n_bins)
    record.source_test_acc, record.source_ece = src_acc, src_ece.ece
    record.target_test_acc, record.target_ece = tgt_acc, tgt_ece.ece
