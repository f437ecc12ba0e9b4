"""Trainers for source fine-tuning, mixed self-supervised training and meta
pseudo-labelling, plus the baseline runner that chains them.

All randomness comes from ``Rng(seed)`` children keyed by purpose and global
step, so every run is a pure function of (config, data, seed) and resuming
from a checkpoint continues exactly where an uninterrupted run would be.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .augment import SpecAugmentPlan, placement_policy
from .checkpoint import CheckpointError, TrainState, checkpoint_name, load_params, load_state, save_params, save_state
from .data import Batch, Corpus, epoch_batch, make_batches
from .evaluation import EvalReport, decode_corpus, evaluate, greedy_decode
from .model import ForwardOutput, ModelConfig, ModelParams, forward, gumbel_temperature_at, init_params
from .optim import AdamState, adamw_step
from .rng import Rng

log = logging.getLogger(__name__)

METHODS = ("FT", "CPT", "M2DS2", "FT_MP", "M2DS2_MP", "MSDA")
TEACHER_OBJECTIVES = ("msda", "ablation_eq3")
STUDENT_OBJECTIVES = ("standard", "ablation_eq4")


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class Stage1Config:
    coeffs: L.Stage1Coeffs = field(default_factory=L.Stage1Coeffs)
    lr: float = 2e-3
    max_epochs: int = 8
    batch_size: int = 16
    specaugment: SpecAugmentPlan = field(default_factory=SpecAugmentPlan)
    seed: int = 0
    weight_decay: float = 0.01
    diversity_weight: float = L.DEFAULT_DIVERSITY_WEIGHT
    max_steps: Optional[int] = None  # hard cap, mainly for tests

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"stage1.lr must be > 0, got {self.lr}")
        if self.max_epochs < 1:
            raise ValueError(f"stage1.max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"stage1.batch_size must be >= 1, got {self.batch_size}")


@dataclass
class Stage2Config:
    coeffs: L.Stage2Coeffs = field(default_factory=L.Stage2Coeffs)
    student_lr: float = 3e-4
    teacher_lr: float = 3e-4
    max_epochs: int = 4
    batch_size: int = 16
    specaugment: SpecAugmentPlan = field(default_factory=SpecAugmentPlan)
    seed: int = 0
    weight_decay: float = 0.01
    diversity_weight: float = L.DEFAULT_DIVERSITY_WEIGHT
    student_init: str = "copy"  # or "fresh"
    metapl_source_term: bool = False
    metapl_source_weight: float = 1.0
    carry_optimizer: bool = True  # teacher (and a copied student) inherit stage-one Adam moments
    evaluate_initial: bool = True  # the untrained student copy competes in checkpoint selection
    feedback_baseline: bool = True  # subtract a moving average of h before weighting the teacher loss
    feedback_baseline_decay: float = 0.9
    divergence_factor: float = 10.0
    divergence_window: int = 5
    divergence_floor: float = 1.0  # reference loss never taken below this (nats per token)
    max_steps: Optional[int] = None

    def validate(self) -> None:
        for name in ("student_lr", "teacher_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"stage2.{name} must be > 0, got {getattr(self, name)}")
        if self.max_epochs < 1:
            raise ValueError(f"stage2.max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"stage2.batch_size must be >= 1, got {self.batch_size}")
        if self.student_init not in ("copy", "fresh"):
            raise ValueError(f"stage2.student_init must be 'copy' or 'fresh', got {self.student_init!r}")


@dataclass
class Splits:
    """Train/dev/test corpora of both domains. Target-train labels are never read."""

    source_train: Corpus
    source_dev: Corpus
    source_test: Corpus
    target_train: Corpus
    target_dev: Corpus
    target_test: Corpus

    @classmethod
    def from_corpora(cls, source: Corpus, target: Corpus) -> "Splits":
        return cls(
            source.split("train"), source.split("dev"), source.split("test"),
            target.split("train"), target.split("dev"), target.split("test"),
        )

    def with_target_train(self, corpus: Corpus) -> "Splits":
        return replace(self, target_train=corpus)


# --------------------------------------------------------------------------
# logging and bookkeeping


class MetricsLog:
    """JSON-lines metrics. Records are kept in memory and appended to ``path``."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, allow_nan=True) + "\n")


class AugmentationAudit:
    """Counts forward passes per (stage, role) and how many saw augmented inputs."""

    def __init__(self):
        self.calls: dict = {}
        self.augmented: dict = {}

    def record(self, stage: str, role: str, out: ForwardOutput) -> None:
        key = f"{stage}/{role}"
        self.calls[key] = self.calls.get(key, 0) + 1
        self.augmented[key] = self.augmented.get(key, 0) + int(out.augmented)


def _forward(
    params: ModelParams,
    batch: Batch,
    stage: str,
    role: str,
    mode: str,
    rng: Rng,
    plan: Optional[SpecAugmentPlan],
    temperature: float,
    audit: Optional[AugmentationAudit],
    with_codebook: bool = False,
) -> ForwardOutput:
    """Every trainer forward goes through here so the augmentation policy is enforced."""
    if not placement_policy(stage, role):
        plan = None
    out = forward(params, batch, mode=mode, rng=rng, augment_plan=plan, gumbel_temperature=temperature,
                  with_codebook=with_codebook)
    if out.augmented and not placement_policy(stage, role):
        raise AssertionError(f"{role} received augmented inputs during {stage}")
    if audit is not None:
        audit.record(stage, role, out)
    return out


def _labels(batch: Batch, vocab) -> list:
    return [vocab.encode(u.transcript) for u in batch.utterances]


def _grads(params: ModelParams) -> dict:
    return {k: v.grad for k, v in params.items()}


def _summary(bundle: L.LossBundle) -> dict:
    return {"total": float(bundle.total.data), "terms": bundle.values()}


def steps_per_epoch(*sizes: int, batch_size: int) -> int:
    return max(1, -(-max(sizes) // batch_size))


@dataclass
class StageResult:
    state: TrainState  # final state of the trained role
    best_params: ModelParams
    metrics: MetricsLog
    checkpoints: list = field(default_factory=list)
    audit: AugmentationAudit = field(default_factory=AugmentationAudit)
    teacher_state: Optional[TrainState] = None  # stage 2 only
    best_state: Optional[TrainState] = None  # full state (incl. optimizer moments) at the selected step


def _dev_wer(params: ModelParams, corpus: Corpus, batch_size: int) -> float:
    return evaluate(params, corpus, batch_size=max(batch_size, 32)).wer


class _Checkpointer:
    def __init__(self, directory: Optional[Path], meta: Optional[dict] = None):
        self.directory = Path(directory) if directory is not None else None
        self.meta = meta or {}
        self.paths: list = []

    def save(self, state: TrainState) -> Optional[Path]:
        if self.directory is None:
            return None
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / checkpoint_name(state.role, state.stage, state.step)
        save_state(path, state, self.meta)
        self.paths.append(path)
        return path

    def prune(self, keep_steps: set, role: str, stage: str) -> None:
        """Drop older checkpoints of ``role`` except those at ``keep_steps``."""
        kept = []
        for path in self.paths:
            name = path.name
            prefix = f"{role}-{stage}-"
            if name.startswith(prefix):
                step = int(name[len(prefix):-len(".ckpt")])
                if step not in keep_steps and path.exists():
                    path.unlink()
                    continue
            kept.append(path)
        self.paths = kept


def _select(state: TrainState, wer: float) -> bool:
    if wer < state.best_dev_wer:
        state.best_dev_wer = wer
        state.best_step = state.step
        return True
    return False


# --------------------------------------------------------------------------
# supervised / mixed self-supervised training on one model


def _supervised_loop(
    init: ModelParams,
    data: Splits,
    cfg: Stage1Config,
    stage: str,
    with_ssl: bool,
    metrics: Optional[MetricsLog],
    ckpt_dir: Optional[Path],
    resume: Optional[TrainState],
    audit: Optional[AugmentationAudit],
    gumbel_offset: int = 0,
    resume_best: Optional[TrainState] = None,
    meta: Optional[dict] = None,
) -> StageResult:
    cfg.validate()
    metrics = metrics if metrics is not None else MetricsLog()
    audit = audit if audit is not None else AugmentationAudit()
    vocab = data.source_train.vocab
    model_cfg = init.config
    sizes = [len(data.source_train)] + ([len(data.target_train)] if with_ssl else [])
    per_epoch = steps_per_epoch(*sizes, batch_size=cfg.batch_size)
    total = per_epoch * cfg.max_epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    if resume is not None:
        state = resume.copy()
    else:
        params = init.copy()
        state = TrainState("model", stage, params, AdamState.zeros_like(params.arrays()), seed=cfg.seed)
        state.extra["gumbel_offset"] = gumbel_offset
    root = Rng(cfg.seed).child("supervised")
    src_order, tgt_order = root.child("source-order"), root.child("target-order")
    ckpt = _Checkpointer(ckpt_dir, dict(meta or {}, stage=stage, vocab=vocab.words))
    best_state = resume_best if resume_best is not None else state.copy()
    coeffs = cfg.coeffs if with_ssl else L.Stage1Coeffs(0.0, 0.0)
    kappa = model_cfg.contrastive_temperature
    offset = state.extra.get("gumbel_offset", 0)

    while state.step < total:
        s = state.step
        rng = root.child("step", s)
        bs = epoch_batch(data.source_train.utterances, cfg.batch_size, s, src_order)
        temp = gumbel_temperature_at(model_cfg, offset + s)
        state.params.zero_grads()
        ctc_out = _forward(state.params, bs, stage, "model", "ctc_only", rng.child("source-ctc"),
                           cfg.specaugment, temp, audit)
        if with_ssl:
            bt = epoch_batch(data.target_train.utterances, cfg.batch_size, s, tgt_order)
            outs = {}
            for key, batch, coeff in (("source", bs, coeffs.alpha), ("target", bt, coeffs.beta)):
                # zero-weight terms are still logged but kept out of the graph
                if coeff == 0:
                    with ad.no_grad():
                        outs[key] = _forward(state.params, batch, stage, "model", "with_ssl",
                                             rng.child(f"{key}-ssl"), cfg.specaugment, temp, audit)
                else:
                    outs[key] = _forward(state.params, batch, stage, "model", "with_ssl",
                                         rng.child(f"{key}-ssl"), cfg.specaugment, temp, audit)
            bundle = L.m2ds2_loss(outs["source"], outs["target"], _labels(bs, vocab), coeffs, kappa,
                                  ctc_out_source=ctc_out, diversity_weight=cfg.diversity_weight)
        else:
            ctc, res = L.ctc_term(ctc_out, _labels(bs, vocab))
            bundle = L.compose({"ctc_source": ctc}, {"ctc_source": 1.0}, {"ctc_skipped": res.skipped})
        if bundle.total.requires_grad:
            ad.backward(bundle.total)
        applied = adamw_step(state.params.arrays(), _grads(state.params), state.optim, cfg.lr,
                             weight_decay=cfg.weight_decay)
        state.step += 1
        record = {"stage": stage, "step": state.step, "epoch": state.epoch, "lr": cfg.lr,
                  "total": float(bundle.total.data), "terms": bundle.values(),
                  "update_applied": applied, "gumbel_temperature": temp}
        record.update({k: v for k, v in bundle.info.items() if k == "ctc_skipped"})
        metrics.write(record)
        if not np.isfinite(bundle.total.data):
            raise TrainingDiverged(f"{stage}: non-finite loss at step {state.step}")
        if state.step % per_epoch == 0 or state.step == total:
            state.epoch += 1
            wer = _dev_wer(state.params, data.source_dev, cfg.batch_size)
            improved = _select(state, wer)
            if improved:
                best_state = state.copy()
            metrics.write({"stage": stage, "epoch": state.epoch, "step": state.step, "dev_wer": wer,
                           "dev_set": "source_dev", "best": improved})
            ckpt.save(state)
            ckpt.prune({state.best_step, state.step}, state.role, stage)
    if state.best_step < 0:
        best_state = state.copy()
    return StageResult(state, best_state.params, metrics, list(ckpt.paths), audit, best_state=best_state)


def train_ft(init: ModelParams, data: Splits, cfg: Stage1Config, metrics=None, ckpt_dir=None, resume=None,
             audit=None, resume_best=None, meta=None) -> StageResult:
    """Source-only CTC fine-tuning with SpecAugment.

    ``resume`` continues from a saved state; ``resume_best`` is the state at
    its best-dev step when that differs from the resume point.
    """
    return _supervised_loop(init, data, cfg, "ft", False, metrics, ckpt_dir, resume, audit, resume_best=resume_best,
                            meta=meta)


def train_stage1(init: ModelParams, data: Splits, cfg: Stage1Config, metrics=None, ckpt_dir=None, resume=None,
                 audit=None, resume_best=None, meta=None) -> StageResult:
    """Source CTC plus weighted self-supervision on source and target batches.

    The CTC term uses its own unmasked pass over the (augmented) source batch
    with the same random stream as plain fine-tuning, so zero self-supervision
    weights reproduce :func:`train_ft` exactly.
    """
    return _supervised_loop(init, data, cfg, "stage1", True, metrics, ckpt_dir, resume, audit,
                            resume_best=resume_best, meta=meta)


def train_ssl(init: ModelParams, corpus: Corpus, cfg: Stage1Config, num_steps: int, metrics=None,
              audit=None) -> ModelParams:
    """Self-supervised continued pretraining (contrastive + diversity) on one corpus."""
    cfg.validate()
    metrics = metrics if metrics is not None else MetricsLog()
    params = init.copy()
    opt = AdamState.zeros_like(params.arrays())
    root = Rng(cfg.seed).child("pretrain")
    order = root.child("order")
    for s in range(num_steps):
        rng = root.child("step", s)
        batch = epoch_batch(corpus.utterances, cfg.batch_size, s, order)
        temp = gumbel_temperature_at(params.config, s)
        params.zero_grads()
        out = _forward(params, batch, "cpt", "model", "with_ssl", rng, cfg.specaugment, temp, audit)
        loss, parts = L.ssl_loss(out, params.config.contrastive_temperature, cfg.diversity_weight)
        ad.backward(loss)
        adamw_step(params.arrays(), _grads(params), opt, cfg.lr, weight_decay=cfg.weight_decay)
        metrics.write({"stage": "cpt", "step": s + 1, "lr": cfg.lr, "total": float(loss.data), "terms": parts})
    return params


# --------------------------------------------------------------------------
# meta pseudo-labelling


def pseudo_label(teacher: ModelParams, corpus: Corpus, batch_size: int = 32) -> Corpus:
    """Greedy pseudo-labels from clean target features.

    Utterances that decode to nothing keep an empty label; CTC skips them.
    """
    hyps = decode_corpus(teacher, corpus.utterances, batch_size)
    utts = [replace(u, pseudo_label=list(h)) for u, h in zip(corpus.utterances, hyps)]
    return Corpus(corpus.vocab, utts)


def empty_pseudo_labels(corpus: Corpus) -> list[str]:
    return [u.id for u in corpus.utterances if u.pseudo_label is not None and len(u.pseudo_label) == 0]


def feedback_coefficient(loss_before: float, loss_after: float) -> float:
    """Student improvement on labeled data; zero when not finite."""
    h = float(loss_before) - float(loss_after)
    return h if math.isfinite(h) else 0.0


def feedback_term(h: float, teacher_label_loss) -> ad.DiffValue:
    """h times the teacher's loss on its own hard labels, differentiable in the teacher."""
    return ad.scale(teacher_label_loss, h)


@dataclass
class MetaFeedback:
    h: float
    loss_before: float
    loss_after: float
    term: ad.DiffValue
    zeroed: bool = False


def meta_feedback(
    student_before: ModelParams,
    student_after: ModelParams,
    source_batch: Batch,
    source_labels: Sequence,
    teacher_out: ForwardOutput,
    pseudo_labels: Sequence,
) -> MetaFeedback:
    """Loss-difference feedback for the teacher.

    h = CTC(student_before on source) - CTC(student_after on source); the
    returned term is h * CTC(teacher on target, its pseudo-labels).
    """
    before = _student_source_loss(student_before, source_batch, source_labels)
    after = _student_source_loss(student_after, source_batch, source_labels)
    return _feedback(before, after, teacher_out, pseudo_labels)


def _feedback(before: float, after: float, teacher_out: ForwardOutput, pseudo_labels) -> MetaFeedback:
    raw = before - after
    h = feedback_coefficient(before, after)
    teacher_ctc, _ = L.ctc_term(teacher_out, pseudo_labels)
    return MetaFeedback(h, before, after, feedback_term(h, teacher_ctc), zeroed=not math.isfinite(raw))


def _student_source_loss(params: ModelParams, batch: Batch, labels) -> float:
    with ad.no_grad():
        out = forward(params, batch, mode="ctc_only")
        res = L.ctc_batch_loss(out.ctc_log_probs, out.lengths, labels)
    return float("nan") if res.loss is None else float(res.loss.data)


class _DivergenceGuard:
    """Compares a running mean of the student's source loss to its initial level."""

    def __init__(self, factor: float, window: int, state: dict, floor: float = 0.0):
        self.factor = factor
        self.floor = floor
        self.window = max(1, window)
        self.state = state  # persisted in TrainState.extra
        self.state.setdefault("guard_initial", [])
        self.state.setdefault("guard_recent", [])

    def update(self, value: float, step: int) -> None:
        if not math.isfinite(value):
            raise TrainingDiverged(f"stage2: student source loss is not finite at step {step}")
        initial, recent = self.state["guard_initial"], self.state["guard_recent"]
        if len(initial) < self.window:
            initial.append(value)
        recent.append(value)
        del recent[: -self.window]
        if len(initial) == self.window:
            # a well-trained teacher starts near zero, so a floor keeps ordinary
            # drift from reading as divergence
            ref = max(float(np.mean(initial)), self.floor)
            cur = float(np.mean(recent))
            if cur > self.factor * ref:
                raise TrainingDiverged(
                    f"stage2: student source loss {cur:.4g} (mean of last {len(recent)} steps) exceeds "
                    f"{self.factor:g}x its initial value {ref:.4g} at step {step}"
                )


def train_stage2(
    teacher_init: ModelParams,
    student_init: Optional[ModelParams],
    data: Splits,
    cfg: Stage2Config,
    teacher_objective: str = "msda",
    student_objective: str = "standard",
    metrics: Optional[MetricsLog] = None,
    ckpt_dir: Optional[Path] = None,
    resume: Optional[tuple] = None,
    audit: Optional[AugmentationAudit] = None,
    gumbel_offset: int = 0,
    force_zero_feedback: bool = False,
    source_term_weight: Optional[float] = None,
    teacher_optim: Optional[AdamState] = None,
    meta: Optional[dict] = None,
) -> StageResult:
    """Teacher/student meta pseudo-labelling on the target domain.

    Per step: the teacher labels a clean target batch; the student takes one
    step on the augmented batch against those labels; the student's change in
    source loss (h) scales the teacher's loss on its own labels. ``msda`` adds
    gamma * teacher source CTC and delta * teacher codebook diversity on the
    target batch; ``ablation_eq3`` adds unit-weight self-supervision on both
    domains instead. ``source_term_weight`` overrides gamma for the teacher's
    source CTC term (plain meta pseudo-labelling baselines).
    """
    cfg.validate()
    if teacher_objective not in TEACHER_OBJECTIVES:
        raise ValueError(f"unknown teacher objective {teacher_objective!r}")
    if student_objective not in STUDENT_OBJECTIVES:
        raise ValueError(f"unknown student objective {student_objective!r}")
    metrics = metrics if metrics is not None else MetricsLog()
    audit = audit if audit is not None else AugmentationAudit()
    vocab = data.source_train.vocab
    model_cfg = teacher_init.config
    kappa = model_cfg.contrastive_temperature
    per_epoch = steps_per_epoch(len(data.source_train), len(data.target_train), batch_size=cfg.batch_size)
    total = per_epoch * cfg.max_epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    gamma = cfg.coeffs.gamma if source_term_weight is None else source_term_weight
    delta = cfg.coeffs.delta

    if resume is not None:
        # (teacher state, student state[, student state at the best step])
        teacher, student = resume[0].copy(), resume[1].copy()
    else:
        tp = teacher_init.copy()
        if student_init is not None:
            sp = student_init.copy()
        elif cfg.student_init == "copy":
            sp = teacher_init.copy()
        else:
            sp = init_params(model_cfg, Rng(cfg.seed).child("student-init"))
        # the teacher keeps training, so it keeps its optimizer moments; a copied
        # student starts from the same moments
        carry = cfg.carry_optimizer and teacher_optim is not None
        t_opt = teacher_optim.copy() if carry else AdamState.zeros_like(tp.arrays())
        s_opt = teacher_optim.copy() if carry and student_init is None and cfg.student_init == "copy" \
            else AdamState.zeros_like(sp.arrays())
        teacher = TrainState("teacher", "stage2", tp, t_opt, seed=cfg.seed)
        student = TrainState("student", "stage2", sp, s_opt, seed=cfg.seed)
        student.extra["gumbel_offset"] = gumbel_offset
        teacher.extra["teacher_steps_skipped"] = 0
    offset = student.extra.get("gumbel_offset", 0)
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_window, student.extra, cfg.divergence_floor)
    root = Rng(cfg.seed).child("metapl")
    src_order, tgt_order = root.child("source-order"), root.child("target-order")
    ckpt = _Checkpointer(ckpt_dir, dict(meta or {}, stage="stage2", teacher_objective=teacher_objective,
                                        student_objective=student_objective, vocab=vocab.words))
    T, S = teacher.params, student.params
    best = resume[2].copy() if resume is not None and len(resume) > 2 else student.copy()
    if resume is None and cfg.evaluate_initial:
        wer = _dev_wer(S, data.target_dev, cfg.batch_size)
        _select(student, wer)
        metrics.write({"stage": "stage2", "epoch": 0, "step": 0, "dev_wer": wer, "dev_set": "target_dev",
                       "role": "student", "best": True})

    while student.step < total:
        s = student.step
        rng = root.child("step", s)
        temp = gumbel_temperature_at(model_cfg, offset + s)
        bt = epoch_batch(data.target_train.utterances, cfg.batch_size, s, tgt_order)
        bs = epoch_batch(data.source_train.utterances, cfg.batch_size, s, src_order)
        y_s = _labels(bs, vocab)
        T.zero_grads()
        S.zero_grads()

        # (1) teacher labels the clean target batch
        t_out = _forward(T, bt, "stage2", "teacher", "ctc_only", rng.child("teacher-target"), None, temp, audit,
                         with_codebook=True)
        y_star = [greedy_decode(t_out.utterance_log_probs(i)) for i in range(len(bt))]
        empty = sum(1 for y in y_star if not y)

        # (2) student step on the augmented, pseudo-labelled batch
        before = _student_source_loss(S, bs, y_s)
        s_out = _forward(S, bt, "stage2", "student", "ctc_only", rng.child("student-ctc"), cfg.specaugment, temp,
                         audit)
        s_ctc, s_res = L.ctc_term(s_out, y_star)
        if student_objective == "ablation_eq4":
            s_ssl_out = _forward(S, bt, "stage2", "student", "with_ssl", rng.child("student-ssl"),
                                 cfg.specaugment, temp, audit)
            s_ssl, _ = L.ssl_loss(s_ssl_out, kappa, cfg.diversity_weight)
            s_bundle = L.ablation_student_loss(s_ctc, s_ssl)
        else:
            s_bundle = L.student_loss(s_ctc)
        student_updated = False
        if s_bundle.total.requires_grad:
            ad.backward(s_bundle.total)
            student_updated = adamw_step(S.arrays(), _grads(S), student.optim, cfg.student_lr,
                                         weight_decay=cfg.weight_decay)
        after = _student_source_loss(S, bs, y_s)
        raw_h = feedback_coefficient(before, after)
        baseline = teacher.extra.get("h_baseline")
        centred = raw_h - baseline if (cfg.feedback_baseline and baseline is not None) else raw_h
        if cfg.feedback_baseline:
            decay = cfg.feedback_baseline_decay
            teacher.extra["h_baseline"] = raw_h if baseline is None else decay * baseline + (1 - decay) * raw_h
        if force_zero_feedback:
            centred = 0.0
        fb = MetaFeedback(centred, before, after, feedback_term(centred, L.ctc_term(t_out, y_star)[0]),
                          zeroed=not math.isfinite(before - after))
        if fb.zeroed:
            log.warning("stage2: non-finite feedback at step %d, feedback term zeroed", s + 1)

        # (3) teacher update
        if teacher_objective == "msda":
            if gamma != 0:
                t_src = _forward(T, bs, "stage2", "teacher", "ctc_only", rng.child("teacher-source"), None, temp,
                                 audit)
                t_src_ctc, _ = L.ctc_term(t_src, y_s)
            else:
                t_src_ctc = ad.DiffValue(0.0)
            t_div = L.diversity_loss(t_out.codebook_probs) if delta != 0 else ad.DiffValue(0.0)
            t_bundle = L.stage2_teacher_loss(fb.term, t_src_ctc, t_div, L.Stage2Coeffs(gamma, delta))
        else:
            t_ssl_s = _forward(T, bs, "stage2", "teacher", "with_ssl", rng.child("teacher-source-ssl"), None, temp,
                               audit)
            t_ssl_t = _forward(T, bt, "stage2", "teacher", "with_ssl", rng.child("teacher-target-ssl"), None, temp,
                               audit)
            t_bundle = L.ablation_teacher_loss(fb.term, L.ssl_loss(t_ssl_s, kappa, cfg.diversity_weight)[0],
                                               L.ssl_loss(t_ssl_t, kappa, cfg.diversity_weight)[0])
        teacher_updated = False
        if t_bundle.total.requires_grad:
            ad.backward(t_bundle.total)
            grads = _grads(T)
            # an all-zero gradient leaves the teacher untouched (no decay either)
            if any(g is not None and np.any(g != 0) for g in grads.values()):
                teacher_updated = adamw_step(T.arrays(), grads, teacher.optim, cfg.teacher_lr,
                                             weight_decay=cfg.weight_decay)
        if not teacher_updated:
            teacher.extra["teacher_steps_skipped"] = teacher.extra.get("teacher_steps_skipped", 0) + 1

        student.step += 1
        teacher.step = student.step
        metrics.write({
            "stage": "stage2", "step": student.step, "epoch": student.epoch,
            "lr": {"student": cfg.student_lr, "teacher": cfg.teacher_lr},
            "h": raw_h, "h_centred": fb.h, "student_source_before": before, "student_source_after": after,
            "student": _summary(s_bundle), "teacher": _summary(t_bundle),
            "pseudo_empty": empty, "student_updated": student_updated, "teacher_updated": teacher_updated,
        })
        guard.update(before, student.step)
        if student.step % per_epoch == 0 or student.step == total:
            student.epoch += 1
            teacher.epoch = student.epoch
            wer = _dev_wer(S, data.target_dev, cfg.batch_size)
            improved = _select(student, wer)
            if improved:
                best = student.copy()
            metrics.write({"stage": "stage2", "epoch": student.epoch, "step": student.step, "dev_wer": wer,
                           "dev_set": "target_dev", "role": "student", "best": improved})
            ckpt.save(student)
            ckpt.save(teacher)
            ckpt.prune({student.best_step, student.step}, "student", "stage2")
            ckpt.prune({student.step}, "teacher", "stage2")
    if student.best_step < 0:
        best = student.copy()
    return StageResult(student, best.params, metrics, list(ckpt.paths), audit, teacher_state=teacher,
                       best_state=best)


# --------------------------------------------------------------------------
# baselines


@dataclass
class RunRecord:
    setting: str
    method: str
    seed: int
    target_test_wer: float
    source_test_wer: float
    steps: int
    wall_time: float
    checkpoints: list = field(default_factory=list)
    target_dev_wer: Optional[float] = None

    def row(self) -> dict:
        d = asdict(self)
        d["checkpoints"] = ";".join(str(p) for p in self.checkpoints)
        return d


RECORD_FIELDS = ["setting", "method", "seed", "target_test_wer", "source_test_wer", "steps", "wall_time",
                 "checkpoints", "target_dev_wer", "version", "config_digest"]


def append_summary(path: Path, record: RunRecord, version: str = "", config_digest: str = "") -> None:
    """Append one row; the version and config digest tie the row to the code and config that produced it."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        if new:
            w.writeheader()
        w.writerow(dict(record.row(), version=version, config_digest=config_digest))


@dataclass
class Outcome:
    record: RunRecord
    params: ModelParams
    stages: dict = field(default_factory=dict)  # name -> StageResult


class TeacherCache:
    """In-memory cache of trained stage-one models keyed by (method, seed, config digest)."""

    def __init__(self):
        self._items: dict = {}

    def get(self, key):
        return self._items.get(key)

    def put(self, key, value) -> None:
        self._items[key] = value


def _digest(*parts) -> str:
    blob = json.dumps([p if isinstance(p, (dict, list, str, int, float)) else repr(p) for p in parts],
                      sort_keys=True, default=repr)
    return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:16]


def run_baseline(
    name: str,
    model_cfg: ModelConfig,
    stage1: Stage1Config,
    stage2: Stage2Config,
    data: Splits,
    seed: int,
    setting: str = "synthetic",
    workdir: Optional[Path] = None,
    cache: Optional[TeacherCache] = None,
    teacher: Optional[ModelParams] = None,
    teacher_objective: str = "msda",
    student_objective: str = "standard",
    teacher_checkpoint: Optional[Path] = None,
    meta: Optional[dict] = None,
) -> Outcome:
    """Train and evaluate one method; returns the record and the final model.

    ``teacher`` (or ``teacher_checkpoint``) supplies a ready stage-one model for
    the meta pseudo-labelling methods; otherwise one is trained (and cached).
    ``meta`` (e.g. resolved config and version) is embedded in every checkpoint.
    """
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    start = time.perf_counter()
    workdir = Path(workdir) if workdir is not None else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)

    def metrics_for(stage):
        log_ = MetricsLog(workdir / f"metrics-{stage}.jsonl" if workdir is not None else None)
        if meta and meta.get("provenance") is not None:
            log_.write({"kind": "provenance", "stage": stage, **meta["provenance"]})
        return log_

    s1 = replace(stage1, seed=seed)
    s2 = replace(stage2, seed=seed)
    init = init_params(model_cfg, Rng(seed).child("init"))
    stages: dict = {}
    checkpoints: list = []

    def first_stage(kind: str):
        target_ids = [] if kind == "FT" else [u.id for u in data.target_train.utterances]
        key = (kind, seed, _digest(model_cfg.to_dict(), asdict(s1), [u.id for u in data.source_train.utterances],
                                   target_ids))
        if cache is not None and cache.get(key) is not None:
            return cache.get(key)
        if kind == "FT":
            res = train_ft(init, data, s1, metrics_for("ft"), workdir, meta=meta)
        elif kind == "CPT":
            per_epoch = steps_per_epoch(len(data.source_train), batch_size=s1.batch_size)
            n = per_epoch * s1.max_epochs if s1.max_steps is None else min(per_epoch * s1.max_epochs, s1.max_steps)
            pre = train_ssl(init, data.target_train, s1, n, metrics_for("cpt"))
            res = train_ft(pre, data, s1, metrics_for("ft"), workdir, meta=meta)
        else:
            res = train_stage1(init, data, s1, metrics_for("stage1"), workdir, meta=meta)
        if cache is not None:
            cache.put(key, res)
        return res

    if name in ("FT", "CPT", "M2DS2"):
        res = first_stage(name if name != "M2DS2" else "stage1")
        stages["stage1" if name == "M2DS2" else name.lower()] = res
        final = res.best_params
        steps = res.state.step
        checkpoints = res.checkpoints
    else:
        gumbel_offset = 0
        t_optim = None
        if teacher is None and teacher_checkpoint is not None:
            try:
                teacher = load_state(teacher_checkpoint)[0]
            except CheckpointError:
                teacher, teacher_meta = load_params(teacher_checkpoint)
                gumbel_offset = int(teacher_meta.get("step", 0))
            checkpoints.append(Path(teacher_checkpoint))
        if teacher is None:
            res1 = first_stage("FT" if name == "FT_MP" else "stage1")
            stages["ft" if name == "FT_MP" else "stage1"] = res1
            teacher = res1.best_state
            checkpoints.extend(res1.checkpoints)
        if isinstance(teacher, TrainState):
            gumbel_offset = teacher.step + teacher.extra.get("gumbel_offset", 0)
            t_optim = teacher.optim
            teacher = teacher.params
        weight = None
        coeffs = s2.coeffs
        if name in ("FT_MP", "M2DS2_MP"):
            coeffs = L.Stage2Coeffs(0.0, 0.0)
            weight = s2.metapl_source_weight if s2.metapl_source_term else 0.0
        s2 = replace(s2, coeffs=coeffs)
        res2 = train_stage2(teacher, None, data, s2, teacher_objective, student_objective, metrics_for("stage2"),
                            workdir, gumbel_offset=gumbel_offset, source_term_weight=weight, teacher_optim=t_optim, meta=meta)
        stages["stage2"] = res2
        final = res2.best_params
        steps = res2.state.step + sum(r.state.step for r in stages.values() if r is not res2)
        checkpoints.extend(res2.checkpoints)

    best_path = None
    if workdir is not None:
        role = "student" if "stage2" in stages else "model"
        stage = "stage2" if "stage2" in stages else next(iter(stages))
        best_step = stages[stage].state.best_step
        best_path = workdir / f"{role}-{stage}-{best_step}.best.ckpt"
        best_state = stages[stage].best_state
        best_meta = dict(meta or {}, method=name, seed=seed, kind="best", vocab=data.source_train.vocab.words)
        if best_state is not None:
            save_state(best_path, best_state, best_meta)
        else:
            save_params(best_path, final, dict(best_meta, role=role, stage=stage, step=best_step))
    tgt = evaluate(final, data.target_test)
    src = evaluate(final, data.source_test)
    record = RunRecord(
        setting=setting, method=name, seed=seed, target_test_wer=tgt.wer, source_test_wer=src.wer, steps=steps,
        wall_time=round(time.perf_counter() - start, 3),
        checkpoints=[str(p) for p in checkpoints] + ([str(best_path)] if best_path else []),
        target_dev_wer=stages["stage2"].state.best_dev_wer if "stage2" in stages else None,
    )
    return Outcome(record, final, stages)
