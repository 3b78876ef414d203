"""Experiment grid: train per seed, pick checkpoints, unlearn, measure, persist.

Results go to an append-only JSONL log (one RunRecord per grid cell). The log
is the single source of truth: summaries and report CSVs are derived from it,
and a restarted run skips every cell already present.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import data as dt
from . import metrics as mt
from . import train as tr
from . import unlearn as ul
from . import zoo
from .numkernel import RngState
from .zoo import ModelSpec

log = logging.getLogger(__name__)

OUT_ENV = "GROKUNLEARN_OUT"
AXES = ("checkpoint", "algorithm", "mode", "fraction", "seed")
STATUSES = ("ok", "diverged", "skipped", "failed")
REPORT_KINDS = ("summary_table", "efficiency_curves", "checkpoint_sweep")


# config ------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    dataset: dict
    model: dict
    train: dict
    splits: list
    checkpoints: list
    algorithms: list
    seeds: list
    metrics: dict = field(default_factory=dict)
    output_dir: str | None = None
    workers: int = 1
    name: str = "experiment"

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if not self.splits or not self.checkpoints or not self.algorithms:
            raise ValueError("splits, checkpoints and algorithms must be nonempty")
        for sel in self.checkpoints:
            if not (isinstance(sel, int) or sel in ("pre", "grok", "final", "all")):
                raise ValueError(f"bad checkpoint selector {sel!r}")
        for a in self.algorithms:
            if a.get("algorithm") not in ul.ALGORITHMS:
                raise ValueError(f"unknown algorithm in {a!r}")
        for s in self.splits:
            dt.SplitSpec(**_split_fields(s)).validate()
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d).validate()

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def semantic(self) -> dict:
        """Fields that affect results (output location and parallelism do not)."""
        d = asdict(self)
        for k in ("output_dir", "workers", "name"):
            d.pop(k)
        return d

    def out(self) -> Path:
        return Path(self.output_dir) if self.output_dir else default_out()


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV) or "runs")


def _split_fields(s: dict) -> dict:
    d = dict(s)
    if "target_classes" in d:
        d["target_classes"] = tuple(d["target_classes"])
    return d


def _canonical(obj):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, float) and obj.is_integer():
        return int(obj)
    return obj


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(_canonical(cfg.semantic()), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# records -----------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    axes: dict
    metrics: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"
    message: str = ""
    train_step: int | None = None

    def key(self) -> tuple:
        return (self.config_hash,) + tuple(str(self.axes.get(a)) for a in AXES)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=_json_default)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o)}")


class ResultsStore:
    """Append-only JSONL record log with a single serialised writer.

    A torn final line (a crash mid-write) is dropped on open; duplicate keys
    keep the first record.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.records: list = []
        self._keys: set = set()
        if self.path.exists():
            self._load()

    def _load(self):
        raw = self.path.read_bytes()
        good = raw.rfind(b"\n") + 1
        if good < len(raw):
            log.warning("dropping truncated final record in %s", self.path)
            with self.path.open("r+b") as fh:
                fh.truncate(good)
        for line in raw[:good].decode().splitlines():
            if not line.strip():
                continue
            rec = RunRecord.from_dict(json.loads(line))
            if rec.key() not in self._keys:
                self._keys.add(rec.key())
                self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def has(self, key: tuple) -> bool:
        return key in self._keys

    def append(self, rec: RunRecord) -> bool:
        """Write ``rec`` unless its key is already present; returns True if written."""
        if rec.status not in STATUSES:
            raise ValueError(f"bad status {rec.status!r}")
        line = rec.to_json() + "\n"
        with self._lock:
            if rec.key() in self._keys:
                return False
            with self.path.open("a") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            self._keys.add(rec.key())
            self.records.append(rec)
        return True


# data/model construction -----------------------------------------------------------


def build_data(ds: dict) -> tuple:
    """(train, test) datasets from a config section."""
    ds = dict(ds)
    kind = ds.pop("kind")
    if kind == "modular":
        return dt.gen_modular_arithmetic(**ds)
    if kind == "toy_images":
        if "dims" in ds:
            ds["dims"] = tuple(ds["dims"])
        return dt.gen_toy_images(**ds)
    if kind == "kv_qa":
        qa = dt.gen_kv_qa(**ds)
        return qa, qa
    raise ValueError(f"unknown dataset kind {kind!r}")


def model_spec(cfg: ExperimentConfig, seed: int) -> ModelSpec:
    return ModelSpec.from_dict(dict(cfg.model, seed=seed))


@dataclass
class TrainedRun:
    seed: int
    spec: ModelSpec
    trajectory: tr.TrajectoryLog
    checkpoints: tr.CheckpointSet
    report: tr.GrokkingReport
    local_labels: np.ndarray | None = None


def _train_kwargs(cfg: ExperimentConfig) -> dict:
    t = dict(cfg.train)
    t.pop("pre_min_train_acc", None)
    t["opt"] = tr.OptimizerConfig(**{k: tuple(v) if k == "betas" else v for k, v in t.pop("optimizer").items()})
    return t


def _detect(cfg: ExperimentConfig, traj, ckpt_steps) -> tr.GrokkingReport:
    t = cfg.train
    return tr.detect_grokking(
        traj,
        t.get("fit_threshold", 0.99),
        t.get("grok_threshold", 0.90),
        persistence=t.get("persistence", 3),
        checkpoint_steps=ckpt_steps,
        pre_min_train_acc=t.get("pre_min_train_acc", 0.0),
    )


def train_seed(cfg: ExperimentConfig, seed: int, train_set, test_set, root: Path | None = None) -> TrainedRun:
    """Train (or reload from ``root``) the run for one seed."""
    spec = model_spec(cfg, seed)
    run_dir = None if root is None else root / "train" / f"seed_{seed}"
    needs_labels = any(s.get("mode") == "by_local_grok_label" for s in cfg.splits)
    if run_dir is not None and (run_dir / "done.json").exists():
        traj = tr.TrajectoryLog.from_csv(run_dir / "trajectory.csv")
        ckpts = tr.CheckpointSet.load(run_dir / "checkpoints")
        done = json.loads((run_dir / "done.json").read_text())
        labels = np.array(done["local_labels"], dtype=object) if done.get("local_labels") is not None else None
        return TrainedRun(seed, spec, traj, ckpts, _detect(cfg, traj, ckpts.steps), labels)
    kw = _train_kwargs(cfg)
    if needs_labels:
        kw["track_examples"] = None
    params = zoo.build_model(spec)
    traj, ckpts = tr.train(spec, params, train_set, test_set, rng=RngState(seed, 1), out_dir=run_dir, **kw)
    labels = None
    if needs_labels:
        labels = tr.classify_local_grokking(traj.loss_matrix(), traj.loss_steps)
    rep = _detect(cfg, traj, ckpts.steps)
    if run_dir is not None:
        (run_dir / "done.json").write_text(json.dumps({
            "report": asdict(rep),
            "local_labels": None if labels is None else labels.tolist(),
        }, default=_json_default))
    return TrainedRun(seed, spec, traj, ckpts, rep, labels)


def resolve_checkpoint(run: TrainedRun, selector) -> int | None:
    if selector == "pre":
        return run.report.pre_checkpoint
    if selector == "grok":
        return run.report.grok_checkpoint
    if selector == "final":
        return run.checkpoints.steps[-1]
    if isinstance(selector, int):
        if selector not in run.checkpoints.snapshots:
            raise ValueError(f"no checkpoint at step {selector} for seed {run.seed}")
        return selector
    raise ValueError(f"cannot resolve selector {selector!r}")


def _expand_selectors(cfg: ExperimentConfig, run: TrainedRun) -> list:
    out = []
    for sel in cfg.checkpoints:
        out.extend(run.checkpoints.steps if sel == "all" else [sel])
    return out


def _unlearn_cfg(a: dict, seed: int, axes: dict) -> ul.UnlearnConfig:
    stream = int(hashlib.sha256(json.dumps(axes, sort_keys=True).encode()).hexdigest()[:8], 16)
    return ul.UnlearnConfig(**dict(a, seed=(seed << 32) | stream))


def _before_metrics(cfg, run, params, split, train_set, test_set) -> dict:
    m = cfg.metrics
    spec = run.spec
    out = {}
    if m.get("grad_correlation", True):
        try:
            out["grad_cosine"], out["grad_angle"] = mt.grad_correlation(spec, params, split, train_set)
        except Exception as exc:  # degenerate gradients are data, not a crash
            log.warning("grad_correlation unavailable: %s", exc)
    if m.get("cka", True) and train_set.kind == "classification":
        try:
            out["cka"] = mt.cka_forget_retain(spec, params, split, train_set, seed=run.seed)
        except Exception as exc:
            log.warning("cka unavailable: %s", exc)
    if m.get("local_complexity", False) and spec.family in ("mlp", "cnn_lite"):
        ref = train_set.inputs
        kw = dict(radius=m.get("lc_radius"), frame_size=m.get("lc_frame_size"), seed=run.seed, reference_inputs=ref)
        out["lc_retain"] = mt.local_complexity(spec, params, train_set.subset(split.retain_ids), **kw)
        out["lc_forget"] = mt.local_complexity(spec, params, train_set.subset(split.forget_ids), **kw)
        out["lc_test"] = mt.local_complexity(spec, params, test_set, **kw)
    return out


def run_cell(cfg, chash, run: TrainedRun, selector, step, split_cfg, split, algo, train_set, test_set, before_cache) -> RunRecord:
    axes = dict(checkpoint=str(selector), algorithm=algo["algorithm"], mode=split_cfg.get("mode", "class_partial"),
                fraction=float(split_cfg["forget_fraction"]), seed=run.seed)
    rec = RunRecord(chash, axes, train_step=step)
    if step is None:
        rec.status, rec.message = "skipped", f"checkpoint {selector!r} unavailable (grokked={run.report.grokked})"
        return rec
    t0 = time.perf_counter()
    try:
        spec, params = run.spec, run.checkpoints[step]
        ucfg = _unlearn_cfg(algo, run.seed, axes)
        if ucfg.algorithm == "retrain":
            kw = _train_kwargs(cfg)
            kw.update({k: v for k, v in algo.items() if k in ("steps", "batch_size")})
            res = ul.retrain(spec, split, train_set, test_set, seed=run.seed, **kw)
        else:
            res = ul.run_unlearning(spec, params, split, train_set, ucfg)
        key = (run.seed, step, axes["mode"], axes["fraction"])
        if key not in before_cache:
            before_cache[key] = (
                mt.ua_ra_ta(spec, params, split, train_set, test_set),
                _before_metrics(cfg, run, params, split, train_set, test_set),
            )
        before, extra = before_cache[key]
        after = mt.ua_ra_ta(spec, res.params, split, train_set, test_set)
        kw = dict(extra)
        if cfg.metrics.get("mia", True) and train_set.kind == "classification":
            kw["mia"] = mt.mia_score(spec, res.params, train_set.subset(split.forget_ids), test_set)
        if train_set.kind == "sequence_qa":
            kw["es_retain"] = mt.extraction_strength(spec, res.params, train_set.subset(split.retain_ids))
            kw["es_unlearn"] = mt.extraction_strength(spec, res.params, train_set.subset(split.forget_ids))
        eps = cfg.metrics.get("fgsm_eps") or []
        if eps and train_set.kind == "classification" and spec.family != "transformer_lite":
            kw["fgsm"] = mt.fgsm_robustness(spec, res.params, test_set, eps)
        target = cfg.metrics.get("target_ua")
        if target is not None:
            kw["steps_to_target"] = ul.steps_to_target(res, target)
        report = mt.MetricsReport(before, after, ues=mt.ues(before, after), **kw)
        rec.metrics = report.flat()
        rec.trajectory = [list(t) for t in res.trajectory]
        rec.status = "diverged" if res.diverged else "ok"
    except Exception as exc:
        log.exception("cell %s failed", axes)
        rec.status, rec.message = "failed", f"{type(exc).__name__}: {exc}"
    rec.wall_time = time.perf_counter() - t0
    return rec


def run_experiment(cfg: ExperimentConfig, store: ResultsStore | None = None, workers: int | None = None, only: dict | None = None) -> ResultsStore:
    """Execute (or resume) the full grid; returns the results store.

    ``only`` restricts axes, e.g. {"algorithm": ["ga"]}.
    """
    cfg.validate()
    root = cfg.out()
    root.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    (root / "config.yaml").write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))
    store = store or ResultsStore(root / "records.jsonl")
    train_set, test_set = build_data(cfg.dataset)
    workers = workers or cfg.workers

    def wanted(axis, value) -> bool:
        return only is None or axis not in only or value in only[axis]

    for seed in cfg.seeds:
        if not wanted("seed", seed):
            continue
        run = train_seed(cfg, seed, train_set, test_set, root)
        cells = []
        for split_cfg in cfg.splits:
            sf = _split_fields(split_cfg)
            split = dt.make_split(train_set, dt.SplitSpec(**dict(sf, seed=seed)), aux=run.local_labels, test=test_set)
            for sel in _expand_selectors(cfg, run):
                step = resolve_checkpoint(run, sel)
                for algo in cfg.algorithms:
                    if not (wanted("checkpoint", str(sel)) and wanted("algorithm", algo["algorithm"])):
                        continue
                    axes = dict(checkpoint=str(sel), algorithm=algo["algorithm"], mode=sf.get("mode", "class_partial"),
                                fraction=float(sf["forget_fraction"]), seed=seed)
                    if store.has(RunRecord(chash, axes).key()):
                        continue
                    cells.append((sel, step, split_cfg, split, algo))
        cache: dict = {}
        job = lambda c: store.append(run_cell(cfg, chash, run, c[0], c[1], c[2], c[3], c[4], train_set, test_set, cache))
        if workers == 1:
            for c in cells:
                job(c)
        else:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(job, cells))
    return store


# summaries and reports -------------------------------------------------------------

SUMMARY_METRICS = {"ta": "ta_after", "ra": "ra_after", "ua": "ua_after", "ues": "ues"}
PERCENT = {"ta", "ra", "ua"}


def _records(source) -> list:
    return source.records if isinstance(source, ResultsStore) else list(source)


def summarize(source, group_by=("checkpoint", "algorithm", "mode", "fraction"), metrics=None) -> list:
    """Per-group mean and population std of each metric (ok/diverged records).

    Accuracies are reported in percent. Metrics with no defined values in a
    group are left as None.
    """
    metrics = metrics or SUMMARY_METRICS
    groups: dict = {}
    for rec in _records(source):
        if rec.status not in ("ok", "diverged"):
            continue
        key = tuple(rec.axes[a] for a in group_by)
        groups.setdefault(key, []).append(rec)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        row = dict(zip(group_by, key))
        for name, field_ in metrics.items():
            vals = [r.metrics.get(field_) for r in groups[key]]
            vals = [float(v) * (100.0 if name in PERCENT else 1.0) for v in vals if v is not None]
            if vals:
                arr = np.array(vals)
                row[f"{name}_mean"], row[f"{name}_std"] = float(arr.mean()), float(arr.std())
            else:
                row[f"{name}_mean"] = row[f"{name}_std"] = None
        row["n"] = len(groups[key])
        rows.append(row)
    return rows


def export_records_csv(source, path) -> Path:
    """Flat CSV of records: axes, status, train_step then every metric column."""
    recs = _records(source)
    metric_cols = sorted({k for r in recs for k in r.metrics})
    cols = ["config_hash", *AXES, "status", "train_step", "wall_time", *metric_cols]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in recs:
            vals = [r.config_hash, *(r.axes[a] for a in AXES), r.status, r.train_step, repr(r.wall_time)]
            vals += [_cell(r.metrics.get(c)) for c in metric_cols]
            w.writerow(vals)
    return path


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _parse(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def import_records_csv(path) -> list:
    out = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            axes = {a: row.pop(a) for a in AXES}
            axes["seed"] = int(axes["seed"])
            axes["fraction"] = float(axes["fraction"])
            rec = RunRecord(row.pop("config_hash"), axes, status=row.pop("status"),
                            train_step=_parse(row.pop("train_step")), wall_time=float(row.pop("wall_time")))
            rec.metrics = {k: _parse(v) for k, v in row.items()}
            out.append(rec)
    return out


SUMMARY_COLUMNS = ("ta_mean", "ta_std", "ra_mean", "ra_std", "ua_mean", "ua_std", "ues_mean", "ues_std")


def read_csv_rows(path) -> list:
    with Path(path).open() as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def emit_report(source, kind: str, out_dir, group_by=("checkpoint", "algorithm", "mode", "fraction")) -> Path:
    """Write one report CSV.

    summary_table:      group_by..., ta_mean, ta_std, ra_mean, ra_std, ua_mean, ua_std, ues_mean, ues_std
    efficiency_curves:  checkpoint, algorithm, mode, fraction, seed, step, ua, ra
    checkpoint_sweep:   seed, algorithm, mode, fraction, train_step, ua, ra  (post-unlearning, percent)
    """
    if kind not in REPORT_KINDS:
        raise ValueError(f"unknown report kind {kind!r}")
    recs = _records(source)
    if not recs:
        raise ValueError("store is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{kind}.csv"
    if kind == "summary_table":
        cols = list(group_by) + list(SUMMARY_COLUMNS)
        rows = [{c: r[c] for c in cols} for r in summarize(recs, group_by)]
    elif kind == "efficiency_curves":
        cols = ["checkpoint", "algorithm", "mode", "fraction", "seed", "step", "ua", "ra"]
        rows = [
            dict({a: r.axes[a] for a in cols[:5]}, step=int(s), ua=ua, ra=ra)
            for r in recs if r.status in ("ok", "diverged") for s, ua, ra in r.trajectory
        ]
    else:
        cols = ["seed", "algorithm", "mode", "fraction", "train_step", "ua", "ra"]
        rows = sorted(
            (dict({a: r.axes[a] for a in cols[:4]}, train_step=r.train_step,
                  ua=100.0 * r.metrics["ua_after"], ra=100.0 * r.metrics["ra_after"])
             for r in recs if r.status in ("ok", "diverged")),
            key=lambda d: (d["seed"], d["algorithm"], d["mode"], d["fraction"], d["train_step"]),
        )
        seen, uniq = set(), []
        for d in rows:
            k = tuple(d[c] for c in cols[:5])
            if k not in seen:
                seen.add(k)
                uniq.append(d)
        rows = uniq
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})
    return path


def has_failures(source) -> bool:
    return any(r.status == "failed" for r in _records(source))
