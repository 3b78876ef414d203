"""Evaluation and mechanism-analysis measures.

Accuracies are fractions internally; UES is evaluated with percentages, which
is the scale its published values are quoted on.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numkernel as nk
from . import train as tr
from . import zoo
from .data import Dataset, DataSplit
from .numkernel import DegenerateInputError, RngState
from .zoo import ModelSpec, Params


class UnsupportedFamilyError(ValueError):
    """Metric is not defined for this model family or dataset kind."""


@dataclass(frozen=True)
class AccuracyTriple:
    ua: float
    ra: float
    ta: float

    def percent(self) -> tuple:
        return 100.0 * self.ua, 100.0 * self.ra, 100.0 * self.ta


def _accuracy(spec: ModelSpec, params: Params, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot compute accuracy on an empty split")
    return tr.evaluate(spec, params, data)[0]


def ua_ra_ta(spec: ModelSpec, params: Params, split: DataSplit, data: Dataset, test: Dataset) -> AccuracyTriple:
    """Accuracy on forget, retain (both from ``data``) and test."""
    if len(split.forget_ids) == 0 or len(split.retain_ids) == 0 or len(test) == 0:
        raise ValueError("ua_ra_ta needs nonempty forget, retain and test sets")
    return AccuracyTriple(
        _accuracy(spec, params, data.subset(split.forget_ids)),
        _accuracy(spec, params, data.subset(split.retain_ids)),
        _accuracy(spec, params, test),
    )


def ues(before: AccuracyTriple, after: AccuracyTriple, tol: float = 1e-9) -> float | None:
    """(UA_o - UA_u) / ((TA_o - TA_u)(RA_o - RA_u)) in percent; None if degenerate."""
    ua_o, ra_o, ta_o = before.percent()
    ua_u, ra_u, ta_u = after.percent()
    dt, dr = ta_o - ta_u, ra_o - ra_u
    if abs(dt) < tol or abs(dr) < tol:
        return None
    return (ua_o - ua_u) / (dt * dr)


# membership inference ---------------------------------------------------------


def mia_from_losses(member: np.ndarray, nonmember: np.ndarray) -> tuple:
    """Loss-threshold attack: best balanced accuracy over all thresholds, and AUC.

    Members are predicted when loss <= threshold. Balanced accuracy is folded
    to max(b, 1 - b); AUC is P(member loss < non-member loss) with ties at 1/2.
    """
    m = np.asarray(member, dtype=np.float64)
    n = np.asarray(nonmember, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise ValueError("both loss sets must be nonempty")
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([m, n]))])
    tpr = np.searchsorted(np.sort(m), thresholds, side="right") / m.size
    fpr = np.searchsorted(np.sort(n), thresholds, side="right") / n.size
    bal = 0.5 * (tpr + 1.0 - fpr)
    best = float(np.max(np.maximum(bal, 1.0 - bal)))
    # Mann-Whitney U via midranks
    allv = np.concatenate([m, n])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.size)
    sv = allv[order]
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u_nonmember = ranks[m.size :].sum() - n.size * (n.size + 1) / 2.0
    auc = float(u_nonmember / (m.size * n.size))
    return best, auc


def mia_score(spec: ModelSpec, params: Params, forget: Dataset, test: Dataset) -> tuple:
    return mia_from_losses(tr.per_example_losses(spec, params, forget), tr.per_example_losses(spec, params, test))


# extraction strength ----------------------------------------------------------

NextToken = Callable[[np.ndarray], np.ndarray]


def model_next_token(spec: ModelSpec, params: Params) -> NextToken:
    """Greedy next-token function for a sequence model: [n, t] -> [n]."""

    def step(tokens: np.ndarray) -> np.ndarray:
        return zoo.sequence_logits(spec, params, tokens).data[:, -1, :].argmax(-1)

    return step


def extraction_strength_fn(next_token: NextToken, data: Dataset) -> np.ndarray:
    """Per-example ES = 1 - k*/L with k* the shortest prefix that yields the rest.

    Prefix lengths run from the key length to L - 1; ES is 0 when none works.
    """
    if data.kind != "sequence_qa":
        raise UnsupportedFamilyError("extraction strength needs a sequence_qa dataset")
    seq = data.sequences()
    n, L = seq.shape
    key_len = data.inputs.shape[1]
    k_star = np.full(n, -1)
    for k in range(key_len, L):
        todo = np.flatnonzero(k_star < 0)
        if todo.size == 0:
            break
        cur = seq[todo, :k]
        for _ in range(L - k):
            cur = np.concatenate([cur, next_token(cur)[:, None]], axis=1)
        hit = (cur[:, k:] == seq[todo, k:]).all(axis=1)
        k_star[todo[hit]] = k
    return np.where(k_star < 0, 0.0, 1.0 - k_star / L)


def extraction_strength(spec: ModelSpec, params: Params, data: Dataset) -> float:
    if spec.family != "transformer_lite":
        raise UnsupportedFamilyError("extraction strength needs a sequence model")
    return float(extraction_strength_fn(model_next_token(spec, params), data).mean())


# gradient correlation ---------------------------------------------------------


def mean_gradient(spec: ModelSpec, params: Params, data: Dataset, batch_size: int = 2048) -> nk.GradVector:
    """Gradient of the mean loss over all of ``data`` (chunked, size-weighted)."""
    if len(data) == 0:
        raise ValueError("empty set")
    total = None
    for i in range(0, len(data), batch_size):
        rows = np.arange(i, min(i + batch_size, len(data)))
        _, g = tr.loss_and_grad(spec, params, data, rows)
        vec = nk.GradVector.from_arrays(g, dtype=np.float64) * (len(rows) / len(data))
        total = vec if total is None else total + vec
    return total


def grad_correlation(spec: ModelSpec, params: Params, split: DataSplit, data: Dataset) -> tuple:
    """(cosine, angle in degrees) between mean forget and mean retain gradients."""
    if len(split.forget_ids) == 0 or len(split.retain_ids) == 0:
        raise ValueError("grad_correlation needs nonempty forget and retain sets")
    gf = mean_gradient(spec, params, data.subset(split.forget_ids))
    gr = mean_gradient(spec, params, data.subset(split.retain_ids))
    return nk.cosine_similarity(gf, gr)


# CKA ----------------------------------------------------------------------------


def cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear CKA of two representation matrices with paired rows."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise nk.ShapeError("cka needs 2-D matrices with equal row counts")
    X = X - X.mean(0)
    Y = Y - Y.mean(0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        raise DegenerateInputError("zero-variance representation")
    return float(np.linalg.norm(Y.T @ X) ** 2 / (xx * yy))


def cka_forget_retain(spec: ModelSpec, params: Params, split: DataSplit, data: Dataset, seed: int = 0, cap: int = 512) -> float:
    """CKA of penultimate representations, both sides subsampled to equal size."""
    n = min(len(split.forget_ids), len(split.retain_ids), cap)
    gen = RngState(seed, 0x636B61).generator()
    f = np.sort(gen.choice(split.forget_ids, n, replace=False))
    r = np.sort(gen.choice(split.retain_ids, n, replace=False))
    X = zoo.penultimate_activations(spec, params, data.subset(f).inputs)
    Y = zoo.penultimate_activations(spec, params, data.subset(r).inputs)
    return cka(X, Y)


# local complexity --------------------------------------------------------------


def local_complexity_points(
    spec: ModelSpec,
    params: Params,
    inputs: np.ndarray,
    radius: float,
    frame: np.ndarray,
    chunk: int = 256,
) -> np.ndarray:
    """LC per point: ReLU units whose sign flips between x and any x +- r*e_k.

    ``frame`` is [P, D] with orthonormal rows in the flattened input space.
    """
    if spec.family not in ("mlp", "cnn_lite"):
        raise UnsupportedFamilyError("local complexity needs a ReLU family")
    if radius <= 0:
        raise ValueError("radius must be positive")
    x = np.asarray(inputs, dtype=np.float32)
    shape = x.shape[1:]
    flat = x.reshape(len(x), -1)
    offsets = np.concatenate([radius * frame, -radius * frame]).astype(np.float32)
    out = np.zeros(len(x), dtype=np.int64)
    for i in range(0, len(x), chunk):
        c = flat[i : i + chunk]
        verts = (c[:, None, :] + offsets[None]).reshape(-1, c.shape[1])
        pre_c = zoo.preactivations(spec, params, c.reshape((-1,) + shape))
        pre_v = zoo.preactivations(spec, params, verts.reshape((-1,) + shape))
        count = np.zeros(len(c), dtype=np.int64)
        for zc, zv in zip(pre_c, pre_v):
            sc = zc.reshape(len(c), -1) > 0
            sv = zv.reshape(len(c), len(offsets), -1) > 0
            count += (sv != sc[:, None, :]).any(axis=1).sum(axis=1)
        out[i : i + chunk] = count
    return out


def random_frame(dim: int, size: int, seed: int = 0) -> np.ndarray:
    """``size`` random orthonormal directions in R^dim, as rows."""
    if not 1 <= size <= dim:
        raise ValueError("frame size must be in [1, input dim]")
    g = RngState(seed, 0x6C63).generator().standard_normal((dim, size))
    q, _ = np.linalg.qr(g)
    return q.T


def local_complexity(
    spec: ModelSpec,
    params: Params,
    data: Dataset,
    radius: float | None = None,
    frame_size: int | None = None,
    seed: int = 0,
    reference_inputs: np.ndarray | None = None,
) -> float:
    """Mean LC over ``data``.

    Defaults: radius = 0.05 * mean input norm (of ``reference_inputs`` if
    given, so several splits can share one radius), frame size = min(D, 32).
    """
    flat = np.asarray(data.inputs, dtype=np.float64).reshape(len(data), -1)
    ref = flat if reference_inputs is None else np.asarray(reference_inputs, dtype=np.float64).reshape(len(reference_inputs), -1)
    if radius is None:
        radius = 0.05 * float(np.linalg.norm(ref, axis=1).mean())
    P = frame_size or min(flat.shape[1], 32)
    frame = random_frame(flat.shape[1], P, seed)
    return float(local_complexity_points(spec, params, data.inputs, radius, frame).mean())


# FGSM ----------------------------------------------------------------------------


def fgsm_robustness(spec: ModelSpec, params: Params, data: Dataset, eps_list=(0.05, 0.10, 0.15, 0.20), batch_size: int = 1024) -> list:
    """Accuracy after x + eps * sign(grad_x L), clipped to the input range."""
    if data.kind != "classification" or spec.family == "transformer_lite":
        raise UnsupportedFamilyError("fgsm needs a continuous-input classification model")
    lo, hi = data.meta.get("input_range", (-np.inf, np.inf))
    signs = np.empty_like(data.inputs, dtype=np.float32)
    P = params.tensors(requires_grad=False)
    for i in range(0, len(data), batch_size):
        x = nk.Tensor(data.inputs[i : i + batch_size], requires_grad=True)
        loss = nk.cross_entropy(zoo.forward(spec, P, x), data.labels[i : i + batch_size])
        nk.backward(loss, {"x": x})
        signs[i : i + batch_size] = np.sign(x.grad)
    out = []
    for eps in eps_list:
        if eps == 0:
            adv = data.inputs
        else:
            adv = np.clip(data.inputs + np.float32(eps) * signs, lo, hi).astype(np.float32)
        acc = float(np.mean(zoo.predict(spec, params, adv).argmax(1) == data.labels))
        out.append((float(eps), acc))
    return out


# report --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    triple_before: AccuracyTriple
    triple_after: AccuracyTriple
    ues: float | None = None
    mia: tuple | None = None
    es_retain: float | None = None
    es_unlearn: float | None = None
    grad_cosine: float | None = None
    grad_angle: float | None = None
    cka: float | None = None
    lc_retain: float | None = None
    lc_test: float | None = None
    lc_forget: float | None = None
    fgsm: list = field(default_factory=list)
    steps_to_target: int | None = None

    def __post_init__(self):
        for k, v in self.flat().items():
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite")

    def flat(self) -> dict:
        d = {}
        for k, v in asdict(self).items():
            if k.startswith("triple_"):
                tag = k.split("_")[1]
                for kk, vv in v.items():
                    d[f"{kk}_{tag}"] = vv
            elif k == "mia":
                d["mia_bal_acc"], d["mia_auc"] = v if v else (None, None)
            elif k == "fgsm":
                for eps, acc in v:
                    d[f"fgsm_{eps:g}"] = acc
            else:
                d[k] = v
        return d

    def to_json(self) -> str:
        return json.dumps(self.flat(), sort_keys=True)

    @classmethod
    def from_flat(cls, d: dict) -> "MetricsReport":
        trip = lambda tag: AccuracyTriple(d[f"ua_{tag}"], d[f"ra_{tag}"], d[f"ta_{tag}"])
        fgsm = sorted((float(k[5:]), v) for k, v in d.items() if k.startswith("fgsm_"))
        mia = (d["mia_bal_acc"], d["mia_auc"]) if d.get("mia_bal_acc") is not None else None
        skip = {"mia_bal_acc", "mia_auc"}
        rest = {
            k: v for k, v in d.items()
            if k not in skip and not k.startswith(("fgsm_", "ua_", "ra_", "ta_"))
        }
        return cls(trip("before"), trip("after"), mia=mia, fgsm=fgsm, **rest)

    def append_csv(self, path, extra: dict | None = None) -> Path:
        path = Path(path)
        row = dict(extra or {}, **self.flat())
        new = not path.exists()
        with path.open("a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow(row)
        return path
