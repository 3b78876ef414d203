"""Central finite-difference check of reverse-mode gradients for model families."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from . import zoo
from .numkernel import RngState
from .zoo import ModelSpec, Params


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    rel_errors: np.ndarray
    coords: list
    resampled: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _loss(spec: ModelSpec, P: dict, x, y, trace=None) -> nk.Tensor:
    logits = zoo._run(spec, P, x, trace)
    if spec.family == "transformer_lite":
        logits = logits[:, -1, :]
    return nk.cross_entropy(logits, y)


def _pattern(spec: ModelSpec, P: dict, x, y) -> tuple:
    trace: dict = {}
    loss = _loss(spec, P, x, y, trace).item()
    acts = trace.get("preacts")
    return loss, None if acts is None else tuple((a > 0).tobytes() for a in acts)


def gradcheck(
    spec: ModelSpec,
    params: Params,
    x,
    y,
    n_coords: int = 100,
    h: float = 1e-3,
    seed: int = 0,
    floor: float = 1e-8,
    max_resample: int = 10_000,
) -> GradCheckResult:
    """Compare backward() with (L(w + h e) - L(w - h e)) / 2h on random coordinates.

    Runs in float64. For ReLU families, a coordinate whose stencil changes the
    ReLU on/off pattern straddles a kink where the loss is not differentiable;
    such coordinates are redrawn and counted in ``resampled``.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    gen = RngState(seed, 0x6763).generator()
    with nk.precision(np.float64):
        P = params.tensors(requires_grad=True, dtype=np.float64)
        if spec.family == "cnn_lite" or spec.family == "mlp":
            x = np.asarray(x, dtype=np.float64)
        nk.backward(_loss(spec, P, x, y), P)
        grads = {k: t.grad for k, t in P.items()}
        names = list(P)
        sizes = np.array([P[k].data.size for k in names])
        _, base = _pattern(spec, P, x, y)
        coords, errs, resampled = [], [], 0
        while len(coords) < n_coords:
            k = names[gen.choice(len(names), p=sizes / sizes.sum())]
            i = int(gen.integers(P[k].data.size))
            w = P[k].data.reshape(-1)
            old = w[i]
            w[i] = old + h
            lp, pat_p = _pattern(spec, P, x, y)
            w[i] = old - h
            lm, pat_m = _pattern(spec, P, x, y)
            w[i] = old
            if base is not None and (pat_p != base or pat_m != base):
                resampled += 1
                if resampled > max_resample:
                    raise RuntimeError("too many kink-straddling coordinates")
                continue
            num = (lp - lm) / (2 * h)
            ana = float(grads[k].reshape(-1)[i])
            errs.append(abs(ana - num) / max(abs(ana), abs(num), floor))
            coords.append((k, i))
    errs = np.array(errs)
    return GradCheckResult(float(errs.max()), errs, coords, resampled)


def random_inputs(spec: ModelSpec, n: int, seed: int = 0) -> tuple:
    """Random inputs and labels that fit ``spec``."""
    gen = RngState(seed, 0x7269).generator()
    if spec.family == "mlp":
        x = gen.standard_normal((n, spec.layer_sizes[0]))
    elif spec.family == "cnn_lite":
        x = gen.uniform(0, 1, (n, spec.in_channels, spec.image_size, spec.image_size))
    else:
        x = gen.integers(0, spec.vocab_size, (n, spec.seq_len))
    return x, gen.integers(0, spec.num_classes, n)
