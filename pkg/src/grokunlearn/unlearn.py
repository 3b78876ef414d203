"""Unlearning algorithms applied to a frozen checkpoint.

All gradient-based methods use plain (momentum-free) gradient steps and draw
forget and retain minibatches from separate RNG streams, so turning off one
term of a composite objective reproduces the simpler method bit for bit.
Updates only ever touch training data; the test set is never passed in.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkernel as nk
from . import train as tr
from . import zoo
from .data import Dataset, DataSplit
from .numkernel import NonFiniteError, RngState
from .zoo import ModelSpec, Params

log = logging.getLogger(__name__)

ALGORITHMS = ("ga", "finetune", "grad_tau", "kl_anchor", "fisher", "scrub", "retrain")


@dataclass(frozen=True)
class UnlearnConfig:
    algorithm: str = "ga"
    lr: float = 1e-2
    steps: int = 50
    batch_size: int = 128
    ascent_weight: float = 1.0
    kl_weight: float = 1.0
    fisher_scale: float = 1e-3
    fisher_eps: float = 1e-8
    fisher_exponent: float = -0.25
    fisher_max_examples: int | None = 1024
    scrub_max_epochs: int = 2
    scrub_min_epochs: int = 2
    temperature: float = 2.0
    stop_target_ua: float | None = None
    eval_every: int = 1
    strict_alternation: bool = False
    seed: int = 0

    def validate(self) -> "UnlearnConfig":
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm not in ("fisher", "retrain") and self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.stop_target_ua is not None and not 0 <= self.stop_target_ua <= 1:
            raise ValueError("stop_target_ua must lie in [0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and eval_every >= 1 required")
        return self


@dataclass
class UnlearnResult:
    params: Params
    steps_used: int
    trajectory: list = field(default_factory=list)
    wall_time: float = 0.0
    diverged: bool = False
    algorithm: str = ""

    @property
    def ua(self) -> np.ndarray:
        return np.array([t[1] for t in self.trajectory])

    @property
    def ra(self) -> np.ndarray:
        return np.array([t[2] for t in self.trajectory])


def steps_to_target(result: UnlearnResult, target_ua: float) -> int | None:
    """First logged step whose UA is at or below ``target_ua``."""
    if not result.trajectory:
        raise ValueError("empty trajectory")
    return next((step for step, ua, _ in result.trajectory if ua <= target_ua), None)


class _Session:
    """Shared bookkeeping: batches, evaluation, trajectory, stopping."""

    def __init__(self, spec, params, split, data, cfg, audit=None):
        self.spec, self.cfg, self.data = spec, cfg.validate(), data
        self.forget = data.subset(split.forget_ids)
        self.retain = data.subset(split.retain_ids)
        self.split = split
        self.audit = audit
        root = RngState(cfg.seed, 0x756E6C)
        self.gens = {"forget": root.fork("forget").generator(), "retain": root.fork("retain").generator()}
        self.params = params
        self.last_good = params
        self.t0 = time.perf_counter()
        self.step = 0
        self.trajectory: list = []
        self.diverged = False
        self.record()

    def batch(self, which: str):
        part = self.forget if which == "forget" else self.retain
        if len(part) == 0:
            raise ValueError(f"{which} set is empty")
        k = min(self.cfg.batch_size, len(part))
        rows = np.sort(self.gens[which].choice(len(part), k, replace=False))
        if self.audit is not None:
            ids = self.split.forget_ids if which == "forget" else self.split.retain_ids
            self.audit.append((which, ids[rows]))
        return part, rows

    def grad(self, params, which: str):
        part, rows = self.batch(which)
        return tr.loss_and_grad(self.spec, params, part, rows)[1]

    def record(self):
        ua = tr.evaluate(self.spec, self.params, self.forget)[0] if len(self.forget) else float("nan")
        ra = tr.evaluate(self.spec, self.params, self.retain)[0] if len(self.retain) else float("nan")
        self.trajectory.append((self.step, ua, ra))

    def reached(self) -> bool:
        t = self.cfg.stop_target_ua
        return t is not None and self.trajectory[-1][1] <= t

    def apply(self, direction: dict, sign: float = -1.0):
        """params <- params + sign * lr * direction; records and checks finiteness."""
        lr = np.float32(self.cfg.lr)
        new = {}
        for k, w in self.params.items():
            d = direction[k]
            new[k] = w + lr * d if sign > 0 else w - lr * d
            if not np.isfinite(new[k]).all():
                raise NonFiniteError(f"non-finite parameters after step {self.step + 1}")
        self.params = Params(new)
        self.step += 1
        if self.step % self.cfg.eval_every == 0:
            self.record()

    def result(self) -> UnlearnResult:
        if self.trajectory[-1][0] != self.step and not self.diverged:
            self.record()
        return UnlearnResult(
            self.params, self.step, self.trajectory, time.perf_counter() - self.t0, self.diverged, self.cfg.algorithm
        )

    def run(self, body):
        try:
            while self.step < self.cfg.steps and not self.reached():
                self.last_good = self.params
                body()
        except NonFiniteError as exc:
            log.warning("unlearning diverged: %s", exc)
            self.params = self.last_good
            self.diverged = True
        return self.result()


def ga_unlearn(spec: ModelSpec, params: Params, split: DataSplit, data: Dataset, cfg: UnlearnConfig, audit=None) -> UnlearnResult:
    """Gradient ascent on the forget loss: w <- w + lr * grad L_forget."""
    if len(split.forget_ids) == 0:
        raise ValueError("forget set is empty")
    s = _Session(spec, params, split, data, replace(cfg, algorithm="ga"), audit)
    return s.run(lambda: s.apply(s.grad(s.params, "forget"), sign=+1.0))


def finetune_unlearn(spec: ModelSpec, params: Params, split: DataSplit, data: Dataset, cfg: UnlearnConfig, audit=None) -> UnlearnResult:
    """Descent on the retain loss only."""
    if len(split.retain_ids) == 0:
        raise ValueError("retain set is empty")
    s = _Session(spec, params, split, data, replace(cfg, algorithm="finetune"), audit)
    return s.run(lambda: s.apply(s.grad(s.params, "retain")))


def grad_tau_unlearn(spec: ModelSpec, params: Params, split: DataSplit, data: Dataset, cfg: UnlearnConfig, audit=None) -> UnlearnResult:
    """Retain descent combined with weighted forget ascent.

    Default is one step along -(g_retain - alpha * g_forget) per pair of
    batches; ``strict_alternation`` instead alternates an ascent step (scaled by
    alpha) and a descent step.
    """
    if len(split.forget_ids) == 0 or len(split.retain_ids) == 0:
        raise ValueError("grad_tau needs nonempty forget and retain sets")
    s = _Session(spec, params, split, data, replace(cfg, algorithm="grad_tau"), audit)
    alpha = np.float32(cfg.ascent_weight)

    def combined():
        g_r = s.grad(s.params, "retain")
        g_f = s.grad(s.params, "forget")
        s.apply({k: g_r[k] - alpha * g_f[k] for k in g_r})

    def alternating():
        if s.step % 2 == 0:
            g_f = s.grad(s.params, "forget")
            s.apply({k: alpha * g for k, g in g_f.items()}, sign=+1.0)
        else:
            s.apply(s.grad(s.params, "retain"))

    return s.run(alternating if cfg.strict_alternation else combined)


def kl_anchor_unlearn(
    spec: ModelSpec, params: Params, ref_params: Params, split: DataSplit, data: Dataset, cfg: UnlearnConfig, audit=None
) -> UnlearnResult:
    """Minimise -L_forget + kl_weight * KL(model || ref) on retain batches."""
    if len(split.forget_ids) == 0 or len(split.retain_ids) == 0:
        raise ValueError("kl_anchor needs nonempty forget and retain sets")
    s = _Session(spec, params, split, data, replace(cfg, algorithm="kl_anchor"), audit)
    lam = np.float32(cfg.kl_weight)
    ref = ref_params.tensors(requires_grad=False)

    def body():
        g_f = s.grad(s.params, "forget")
        g_kl = _kl_grad(spec, s.params, ref, *s.batch("retain"), temperature=1.0)
        s.apply({k: -g_f[k] + lam * g_kl[k] for k in g_f})

    return s.run(body)


def _kl_grad(spec, params, ref, part, rows, temperature, sign=1.0, with_ce=False) -> dict:
    P = params.tensors()
    x = part.inputs[rows]
    student = zoo.forward(spec, P, x)
    teacher = zoo.forward(spec, ref, x)
    teacher = nk.Tensor(teacher.data)
    loss = nk.kl_divergence(student, teacher, temperature) * sign
    if with_ce:
        loss = loss + nk.cross_entropy(student, part.labels[rows])
    nk.backward(loss, P)
    return {k: t.grad for k, t in P.items()}


def kl_to_reference(spec: ModelSpec, params: Params, ref_params: Params, data: Dataset, temperature: float = 1.0) -> np.ndarray:
    """Per-example KL(model || ref) over ``data`` (classification)."""
    s = zoo.predict(spec, params, data.inputs).astype(np.float64) / temperature
    t = zoo.predict(spec, ref_params, data.inputs).astype(np.float64) / temperature
    ls = s - s.max(1, keepdims=True)
    ls -= np.log(np.exp(ls).sum(1, keepdims=True))
    lt = t - t.max(1, keepdims=True)
    lt -= np.log(np.exp(lt).sum(1, keepdims=True))
    return (np.exp(ls) * (ls - lt)).sum(1)


def diagonal_fisher(spec: ModelSpec, params: Params, data: Dataset, ids=None) -> dict:
    """Mean squared per-example gradient of the loss, per coordinate."""
    ids = np.arange(len(data)) if ids is None else np.asarray(ids)
    acc = {k: np.zeros(a.shape, dtype=np.float64) for k, a in params.items()}
    for i in ids:
        _, g = tr.loss_and_grad(spec, params, data, np.array([i]))
        for k in acc:
            acc[k] += np.square(g[k], dtype=np.float64)
    return {k: v / max(len(ids), 1) for k, v in acc.items()}


def fisher_forget(spec: ModelSpec, params: Params, split: DataSplit, data: Dataset, cfg: UnlearnConfig, audit=None) -> UnlearnResult:
    """One-shot Gaussian noise with std fisher_scale * (F_retain + eps)^exponent."""
    if len(split.forget_ids) == 0 or len(split.retain_ids) == 0:
        raise ValueError("fisher needs nonempty forget and retain sets")
    cfg = replace(cfg, algorithm="fisher").validate()
    s = _Session(spec, params, split, data, cfg, audit)
    if cfg.fisher_scale == 0:
        return s.result()
    rng = RngState(cfg.seed, 0x66697368)
    ids = np.arange(len(s.retain))
    if cfg.fisher_max_examples is not None and cfg.fisher_max_examples < len(ids):
        ids = np.sort(rng.fork("sample").generator().choice(ids, cfg.fisher_max_examples, replace=False))
    if audit is not None:
        audit.append(("retain", split.retain_ids[ids]))
    fisher = diagonal_fisher(spec, params, s.retain, ids)
    gen = rng.fork("noise").generator()
    noisy = {}
    for k, w in params.items():
        std = cfg.fisher_scale * (fisher[k] + cfg.fisher_eps) ** cfg.fisher_exponent
        noisy[k] = (w + std * gen.standard_normal(w.shape)).astype(np.float32)
    s.params = Params(noisy)
    s.step = 1
    s.record()
    return s.result()


def scrub_unlearn(
    spec: ModelSpec, teacher: Params, split: DataSplit, data: Dataset, cfg: UnlearnConfig, audit=None, student: Params | None = None
) -> UnlearnResult:
    """Student/teacher distillation that diverges on forget and matches on retain.

    Each epoch index e runs a max pass (ascend KL(student || teacher) over the
    forget set) while e < max_epochs, then a min pass (descend KL + CE over the
    retain set) while e < min_epochs. ``steps`` caps the total update count.

    The student defaults to a copy of the teacher. KL has zero gradient there,
    so a max pass alone leaves a copy in place up to rounding; the first min pass (its
    CE term) is what moves it off the fixed point.
    """
    s = _Session(spec, teacher if student is None else student, split, data, replace(cfg, algorithm="scrub"), audit)
    ref = teacher.tensors(requires_grad=False)
    T = cfg.temperature

    def passes():
        for e in range(max(cfg.scrub_max_epochs, cfg.scrub_min_epochs)):
            if e < cfg.scrub_max_epochs:
                yield from _epoch(s, "forget", lambda part, rows: _kl_grad(spec, s.params, ref, part, rows, T, sign=-1.0))
            if e < cfg.scrub_min_epochs:
                yield from _epoch(s, "retain", lambda part, rows: _kl_grad(spec, s.params, ref, part, rows, T, with_ce=True))

    it = passes()

    def body():
        try:
            next(it)
        except StopIteration:
            s.cfg = replace(s.cfg, steps=s.step)

    return s.run(body)


def _epoch(s: _Session, which: str, grad_of):
    part = s.forget if which == "forget" else s.retain
    if len(part) == 0:
        return
    order = s.gens[which].permutation(len(part))
    for i in range(0, len(part), s.cfg.batch_size):
        rows = np.sort(order[i : i + s.cfg.batch_size])
        if s.audit is not None:
            ids = s.split.forget_ids if which == "forget" else s.split.retain_ids
            s.audit.append((which, ids[rows]))
        s.apply(grad_of(part, rows))
        yield


def retrain(
    spec: ModelSpec,
    split: DataSplit,
    data: Dataset,
    val_set: Dataset,
    opt: tr.OptimizerConfig,
    steps: int,
    batch_size: int,
    seed: int = 0,
    **train_kwargs,
) -> UnlearnResult:
    """Fresh initialisation trained on the retain set only (exact unlearning reference)."""
    if len(split.retain_ids) == 0:
        raise ValueError("retain set is empty")
    t0 = time.perf_counter()
    init = zoo.build_model(replace(spec, seed=seed))
    retain = data.subset(split.retain_ids)
    forget = data.subset(split.forget_ids) if len(split.forget_ids) else None
    traj, ckpts = tr.train(
        spec, init, retain, val_set, opt, steps, min(batch_size, len(retain)), rng=RngState(seed, 1), **train_kwargs
    )
    final = ckpts[ckpts.steps[-1]]

    def point(step, p):
        ua = tr.evaluate(spec, p, forget)[0] if forget is not None else float("nan")
        return (step, ua, tr.evaluate(spec, p, retain)[0])

    trajectory = [point(0, init), point(traj.records[-1].step, final)]
    return UnlearnResult(final, traj.records[-1].step, trajectory, time.perf_counter() - t0, False, "retrain")


def run_unlearning(spec: ModelSpec, params: Params, split: DataSplit, data: Dataset, cfg: UnlearnConfig, audit=None) -> UnlearnResult:
    """Dispatch on ``cfg.algorithm`` (retrain excluded: it needs training settings)."""
    cfg.validate()
    if cfg.algorithm == "ga":
        return ga_unlearn(spec, params, split, data, cfg, audit)
    if cfg.algorithm == "finetune":
        return finetune_unlearn(spec, params, split, data, cfg, audit)
    if cfg.algorithm == "grad_tau":
        return grad_tau_unlearn(spec, params, split, data, cfg, audit)
    if cfg.algorithm == "kl_anchor":
        return kl_anchor_unlearn(spec, params, params, split, data, cfg, audit)
    if cfg.algorithm == "fisher":
        return fisher_forget(spec, params, split, data, cfg, audit)
    if cfg.algorithm == "scrub":
        return scrub_unlearn(spec, params, split, data, cfg, audit)
    raise ValueError("retrain is run through unlearn.retrain")
