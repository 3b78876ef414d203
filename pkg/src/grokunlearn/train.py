"""Optimizers, SAM, the training loop and grokking detection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numkernel as nk
from . import zoo
from .data import Dataset
from .numkernel import NonFiniteError, RngState
from .zoo import ModelSpec, Params

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adamw", "sam_sgd", "sam_adamw")
GROKKED, UNGROKKED, AMBIGUOUS = "grokked", "ungrokked", "ambiguous"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    sam_radius: float = 0.0

    def validate(self) -> "OptimizerConfig":
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if (self.sam_radius > 0) != self.kind.startswith("sam_"):
            raise ValueError("sam_radius > 0 exactly when the optimizer is sam_*")
        return self

    @property
    def base_kind(self) -> str:
        return self.kind.removeprefix("sam_")


class Optimizer:
    """SGD with momentum (coupled L2 decay) or AdamW (decoupled decay).

    ``step`` returns fresh Params; the input snapshot is never mutated.
    """

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg.validate()
        self.state: dict = {}
        self.t = 0

    def step(self, params: Params, grads: dict) -> Params:
        c = self.cfg
        self.t += 1
        out = {}
        for k, w in params.items():
            g = np.asarray(grads[k], dtype=np.float32)
            if c.base_kind == "sgd":
                if c.weight_decay:
                    g = g + np.float32(c.weight_decay) * w
                if c.momentum:
                    buf = self.state.get(k)
                    buf = g.copy() if buf is None else np.float32(c.momentum) * buf + g
                    self.state[k] = buf
                    g = buf
                out[k] = w - np.float32(c.lr) * g
            else:
                b1, b2 = c.betas
                m, v = self.state.get(k, (np.zeros_like(w), np.zeros_like(w)))
                m = np.float32(b1) * m + np.float32(1 - b1) * g
                v = np.float32(b2) * v + np.float32(1 - b2) * g * g
                self.state[k] = (m, v)
                mhat = m / np.float32(1 - b1**self.t)
                vhat = v / np.float32(1 - b2**self.t)
                w = w * np.float32(1 - c.lr * c.weight_decay) if c.weight_decay else w
                out[k] = w - np.float32(c.lr) * mhat / (np.sqrt(vhat) + np.float32(c.eps))
        return Params(out)


GradFn = Callable[[Params], tuple]


def sam_step(params: Params, grad_fn: GradFn, optimizer: Optimizer, sam_radius: float) -> tuple:
    """One sharpness-aware update; returns (new params, loss at the original point).

    The gradient at ``w + radius * g / |g|`` drives the base optimizer, applied
    at ``w``. A zero gradient skips the perturbation.
    """
    if sam_radius < 0:
        raise ValueError("sam_radius must be >= 0")
    loss, g = grad_fn(params)
    norm = math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in g.values()))
    if norm == 0.0:
        log.info("zero gradient norm; SAM perturbation skipped")
        return optimizer.step(params, g), loss
    scale = sam_radius / norm
    shifted = Params({k: w + np.float32(scale) * g[k] for k, w in params.items()})
    _, g_adv = grad_fn(shifted)
    return optimizer.step(params, g_adv), loss


# losses ---------------------------------------------------------------------------


def batch_loss(spec: ModelSpec, P: dict, data: Dataset, rows) -> nk.Tensor:
    """Mean cross-entropy on ``rows``; for sequence_qa only answer tokens count."""
    if data.kind == "sequence_qa":
        seq = data.sequences()[rows]
        k = data.inputs.shape[1]
        logits = zoo.sequence_logits(spec, P, seq[:, :-1])
        ans = logits[:, k - 1 :, :]
        n, t, c = ans.shape
        return nk.cross_entropy(ans.reshape(n * t, c), seq[:, k:].reshape(-1))
    return nk.cross_entropy(zoo.forward(spec, P, data.inputs[rows]), data.labels[rows])


def loss_and_grad(spec: ModelSpec, params: Params, data: Dataset, rows) -> tuple:
    P = params.tensors()
    loss = batch_loss(spec, P, data, rows)
    nk.backward(loss, P)
    return float(loss.data), {k: t.grad for k, t in P.items()}


def per_example_losses(spec: ModelSpec, params: Params, data: Dataset, batch_size: int = 4096) -> np.ndarray:
    if data.kind == "sequence_qa":
        seq = data.sequences()
        k = data.inputs.shape[1]
        logits = zoo.sequence_logits(spec, params, seq[:, :-1]).data[:, k - 1 :, :]
        n, t, c = logits.shape
        tok = nk.per_example_cross_entropy(logits.reshape(n * t, c), seq[:, k:].reshape(-1))
        return tok.reshape(n, t).mean(axis=1)
    logits = zoo.predict(spec, params, data.inputs, batch_size)
    return nk.per_example_cross_entropy(logits, data.labels)


def evaluate(spec: ModelSpec, params: Params, data: Dataset) -> tuple:
    """(accuracy, mean loss); sequence accuracy is teacher-forced exact match."""
    if data.kind == "sequence_qa":
        seq = data.sequences()
        k = data.inputs.shape[1]
        logits = zoo.sequence_logits(spec, params, seq[:, :-1]).data[:, k - 1 :, :]
        correct = (logits.argmax(-1) == seq[:, k:]).all(axis=1)
        return float(correct.mean()), float(per_example_losses(spec, params, data).mean())
    logits = zoo.predict(spec, params, data.inputs)
    acc = float(np.mean(logits.argmax(1) == data.labels))
    return acc, float(nk.per_example_cross_entropy(logits, data.labels).mean())


# trajectory -----------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    step: int
    train_acc: float
    val_acc: float
    train_loss: float
    val_loss: float


@dataclass
class TrajectoryLog:
    records: list = field(default_factory=list)
    checkpoint_steps: list = field(default_factory=list)
    loss_steps: list = field(default_factory=list)
    tracked_ids: np.ndarray | None = None
    example_losses: list = field(default_factory=list)

    def append(self, rec: EvalRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("trajectory steps must increase")
        for a in (rec.train_acc, rec.val_acc):
            if not 0.0 <= a <= 1.0:
                raise ValueError("accuracy outside [0, 1]")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def loss_matrix(self) -> np.ndarray:
        """Per-example losses, shape [n_tracked, n_logged_steps]."""
        return np.stack(self.example_losses, axis=1) if self.example_losses else np.zeros((0, 0))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "split", "metric", "value"])
            for r in self.records:
                w.writerow([r.step, "train", "acc", repr(r.train_acc)])
                w.writerow([r.step, "train", "loss", repr(r.train_loss)])
                w.writerow([r.step, "val", "acc", repr(r.val_acc)])
                w.writerow([r.step, "val", "loss", repr(r.val_loss)])
            for s in self.checkpoint_steps:
                w.writerow([s, "checkpoint", "saved", "1"])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrajectoryLog":
        rows: dict = {}
        ckpts = []
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                step = int(row["step"])
                if row["split"] == "checkpoint":
                    ckpts.append(step)
                    continue
                rows.setdefault(step, {})[f"{row['split']}_{row['metric']}"] = float(row["value"])
        log_ = cls(checkpoint_steps=sorted(ckpts))
        for step in sorted(rows):
            d = rows[step]
            log_.append(EvalRecord(step, d["train_acc"], d["val_acc"], d["train_loss"], d["val_loss"]))
        return log_


@dataclass(frozen=True)
class GrokkingReport:
    t_fit: int | None
    t_grok: int | None
    pre_checkpoint: int | None
    grok_checkpoint: int | None
    thresholds: dict
    grokked: bool

    @property
    def gap(self) -> int | None:
        if self.t_fit is None or self.t_grok is None:
            return None
        return self.t_grok - self.t_fit


def detect_grokking(
    traj: TrajectoryLog,
    fit_threshold: float = 0.99,
    grok_threshold: float = 0.90,
    min_gap_steps: int = 0,
    persistence: int = 3,
    checkpoint_steps=None,
    pre_min_train_acc: float = 0.0,
) -> GrokkingReport:
    """Locate memorisation (t_fit) and delayed generalisation (t_grok).

    t_grok is the first eval at or after t_fit with val_acc >= grok_threshold
    that holds for the following ``persistence`` evals (all that exist, near the
    end of the log). The pre checkpoint is the best-val checkpoint at or before
    t_fit with train_acc >= ``pre_min_train_acc``, earliest on ties; the grok
    checkpoint is the first at or after t_grok.
    """
    thresholds = dict(
        fit=fit_threshold, grok=grok_threshold, min_gap_steps=min_gap_steps,
        persistence=persistence, pre_min_train_acc=pre_min_train_acc,
    )
    recs = traj.records
    ckpts = sorted(traj.checkpoint_steps if checkpoint_steps is None else checkpoint_steps)
    fit_idx = next((i for i, r in enumerate(recs) if r.train_acc >= fit_threshold), None)
    if fit_idx is None:
        return GrokkingReport(None, None, None, None, thresholds, False)
    t_fit = recs[fit_idx].step
    if recs[-1].step - t_fit < min_gap_steps:
        raise ValueError(f"trajectory ends {recs[-1].step - t_fit} steps after t_fit; need {min_gap_steps}")
    t_grok = None
    for i in range(fit_idx, len(recs)):
        window = recs[i : i + 1 + persistence]
        if all(r.val_acc >= grok_threshold for r in window):
            t_grok = recs[i].step
            break
    val_at = {r.step: r.val_acc for r in recs}
    train_at = {r.step: r.train_acc for r in recs}
    pre = [s for s in ckpts if s <= t_fit and s in val_at and train_at[s] >= pre_min_train_acc]
    pre_ckpt = min(pre, key=lambda s: (-val_at[s], s)) if pre else None
    grok_ckpt = None
    if t_grok is not None:
        grok_ckpt = next((s for s in ckpts if s >= t_grok), None)
    return GrokkingReport(t_fit, t_grok, pre_ckpt, grok_ckpt, thresholds, t_grok is not None)


def classify_local_grokking(
    losses: np.ndarray, loss_steps, t_candidate: int | None = None, low: float = 0.01, high: float = 0.5
) -> np.ndarray:
    """Label each example by its loss decrease from ``t_candidate`` to the final log.

    Decrease < low -> grokked, > high -> ungrokked, otherwise ambiguous.
    ``t_candidate`` defaults to the logged step nearest 20% of the final step.
    """
    losses = np.asarray(losses, dtype=np.float64)
    steps = list(loss_steps)
    if losses.ndim != 2 or losses.shape[1] != len(steps) or not steps:
        raise ValueError("loss matrix must be [examples, logged steps]")
    if t_candidate is None:
        target = 0.2 * steps[-1]
        t_candidate = min(steps, key=lambda s: (abs(s - target), s))
    if t_candidate not in steps:
        raise KeyError(f"no losses logged at step {t_candidate}")
    if np.isnan(losses).any():
        raise ValueError("missing loss records")
    delta = losses[:, steps.index(t_candidate)] - losses[:, -1]
    out = np.full(len(delta), AMBIGUOUS, dtype=object)
    out[delta < low] = GROKKED
    out[delta > high] = UNGROKKED
    return out


# training loop --------------------------------------------------------------------


@dataclass
class CheckpointSet:
    """In-memory checkpoints by step, optionally mirrored to ``directory``."""

    spec: ModelSpec
    snapshots: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)
    directory: Path | None = None

    def add(self, step: int, params: Params, meta: dict | None = None):
        self.snapshots[step] = params
        if self.directory is not None:
            zoo.save_checkpoint(self.path(step), params, dict(meta or {}, spec=self.spec.to_dict(), step=step))

    def discard(self, step: int):
        self.snapshots.pop(step, None)
        if self.directory is not None:
            for p in (self.path(step), Path(str(self.path(step)) + ".json")):
                p.unlink(missing_ok=True)

    def path(self, step: int) -> Path:
        return Path(self.directory) / f"step_{step:08d}.grkf"

    def __getitem__(self, step: int) -> Params:
        return self.snapshots[step]

    @property
    def steps(self) -> list:
        return sorted(self.snapshots)

    @classmethod
    def load(cls, directory) -> "CheckpointSet":
        directory = Path(directory)
        ckpts = None
        for path in sorted(directory.glob("step_*.grkf")):
            params, meta = zoo.load_checkpoint(path)
            if ckpts is None:
                ckpts = cls(ModelSpec.from_dict(meta["spec"]))
            ckpts.snapshots[int(meta["step"])] = params
        if ckpts is None:
            raise FileNotFoundError(f"no checkpoints in {directory}")
        ckpts.directory = directory
        return ckpts


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, trajectory: TrajectoryLog, checkpoints: CheckpointSet):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.trajectory = trajectory
        self.checkpoints = checkpoints


def train(
    spec: ModelSpec,
    params: Params,
    train_set: Dataset,
    val_set: Dataset,
    opt: OptimizerConfig,
    steps: int,
    batch_size: int,
    eval_every: int = 100,
    checkpoint_every: int | None = None,
    rng: RngState | None = None,
    out_dir=None,
    track_examples: int | None = 256,
    stop_after_grok: int | None = None,
    fit_threshold: float = 0.99,
    grok_threshold: float = 0.90,
    persistence: int = 3,
) -> tuple:
    """Minibatch training with periodic evaluation and checkpointing.

    Checkpoints are kept every ``checkpoint_every`` steps (a multiple of
    ``eval_every``), at the first eval with train_acc >= ``fit_threshold``, and
    at the best validation accuracy seen up to that point. Per-example losses
    are logged at each eval for every sequence_qa example or for
    ``track_examples`` sampled training examples (None tracks all).
    With ``stop_after_grok`` the run ends that many steps after grokking is
    confirmed online.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 1 <= batch_size <= len(train_set):
        raise ValueError("batch_size must be in [1, |train|]")
    checkpoint_every = checkpoint_every or eval_every
    if checkpoint_every % eval_every:
        raise ValueError("checkpoint_every must be a multiple of eval_every")
    rng = rng or RngState(spec.seed, 1)
    gen = rng.generator()
    optimizer = Optimizer(opt)
    ckpts = CheckpointSet(spec, directory=Path(out_dir) / "checkpoints" if out_dir else None)
    traj = TrajectoryLog()
    n = len(train_set)
    if train_set.kind == "sequence_qa" or track_examples is None or track_examples >= n:
        traj.tracked_ids = np.arange(n)
    else:
        traj.tracked_ids = np.sort(rng.fork("track").generator().choice(n, track_examples, replace=False))
    tracked = train_set.subset(traj.tracked_ids)

    state = {"t_fit": None, "best": (-1.0, None), "confirm": None, "stop_at": None}

    def grad_fn(p: Params, rows):
        return loss_and_grad(spec, p, train_set, rows)

    def do_eval(step: int, p: Params):
        tr_acc, tr_loss = evaluate(spec, p, train_set)
        va_acc, va_loss = evaluate(spec, p, val_set)
        if not (math.isfinite(tr_loss) and math.isfinite(va_loss)):
            raise NonFiniteError("non-finite evaluation loss")
        traj.append(EvalRecord(step, tr_acc, va_acc, tr_loss, va_loss))
        traj.loss_steps.append(step)
        traj.example_losses.append(per_example_losses(spec, p, tracked))
        keep = step % checkpoint_every == 0
        if state["t_fit"] is None:
            if va_acc > state["best"][0]:
                old = state["best"][1]
                state["best"] = (va_acc, step)
                keep = True
                if old is not None and old % checkpoint_every:
                    ckpts.discard(old)
            if tr_acc >= fit_threshold:
                state["t_fit"] = step
                keep = True
        if keep:
            ckpts.add(step, p, {"val_acc": va_acc, "train_acc": tr_acc})
        if stop_after_grok is not None and state["stop_at"] is None and state["t_fit"] is not None:
            rep = detect_grokking(traj, fit_threshold, grok_threshold, persistence=persistence, checkpoint_steps=[])
            if rep.t_grok is not None and sum(r.step > rep.t_grok for r in traj.records) >= persistence:
                state["stop_at"] = rep.t_grok + stop_after_grok
                log.info("grokking confirmed at %d; stopping at %d", rep.t_grok, state["stop_at"])

    do_eval(0, params)
    order, cursor = gen.permutation(n), 0
    step = 0
    try:
        for step in range(1, steps + 1):
            if cursor + batch_size > n:
                order, cursor = gen.permutation(n), 0
            rows = order[cursor : cursor + batch_size]
            cursor += batch_size
            if opt.kind.startswith("sam_"):
                params, loss = sam_step(params, lambda p: grad_fn(p, rows), optimizer, opt.sam_radius)
            else:
                loss, g = grad_fn(params, rows)
                params = optimizer.step(params, g)
            if not math.isfinite(loss):
                raise NonFiniteError("non-finite training loss")
            if step % eval_every == 0 or step == steps:
                do_eval(step, params)
                if state["stop_at"] is not None and step >= state["stop_at"]:
                    break
    except NonFiniteError:
        raise TrainingDiverged(step, traj, ckpts) from None
    if traj.records[-1].step not in ckpts.snapshots:
        ckpts.add(traj.records[-1].step, params, {"final": True})
    traj.checkpoint_steps = ckpts.steps
    ckpts.tags.update(t_fit=state["t_fit"], best_val_pre_fit=state["best"][1], final=traj.records[-1].step)
    if out_dir:
        traj.to_csv(Path(out_dir) / "trajectory.csv")
    return traj, ckpts
