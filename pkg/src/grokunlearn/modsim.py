"""Monte Carlo check of gradient correlation under a modular gradient model.

Gradients live in R^d split into m equal blocks (modules). Each module is
active independently with probability p; an active block has squared norm
exactly sigma^2 d / m and shares a fixed unit direction u_i with weight
sqrt(rho), the rest being a fresh unit direction orthogonal to u_i. Under
this construction

    E[<g, g'>]  = p^2 rho sigma^2 d,
    E[||g||^2]  = p sigma^2 d,
    E[cos]      ~ p rho.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numkernel import GradVector, RngState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModularModelCfg:
    m: int = 64
    d: int = 8192
    p: float = 0.5
    rho: float = 0.9
    sigma: float = 1.0
    n_pairs: int = 2000
    seed: int = 0

    def validate(self) -> "ModularModelCfg":
        if self.m < 1 or self.d < 1 or self.d % self.m:
            raise ValueError("need m >= 1 and d a positive multiple of m")
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.d // self.m < 2 and self.rho < 1:
            raise ValueError("block dimension < 2 leaves no direction orthogonal to u_i")
        return self

    @property
    def block(self) -> int:
        return self.d // self.m

    @property
    def predicted(self) -> float:
        return self.p * self.rho


@dataclass(frozen=True)
class SimResult:
    empirical_corr_mean: float
    standard_error: float
    predicted: float
    inner_product_mean: float
    inner_product_se: float
    norm_sq_mean: float
    norm_sq_se: float
    n_trials: int
    resampled: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def sample_module_frame(cfg: ModularModelCfg, rng: RngState) -> np.ndarray:
    """Shared unit direction per module, as an [m, d/m] array of block vectors."""
    cfg.validate()
    u = rng.generator().standard_normal((cfg.m, cfg.block))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def frame_vectors(cfg: ModularModelCfg, frame: np.ndarray) -> np.ndarray:
    """Embed block directions into R^d: row i is supported on block i only."""
    out = np.zeros((cfg.m, cfg.d))
    for i in range(cfg.m):
        out[i, i * cfg.block : (i + 1) * cfg.block] = frame[i]
    return out


def _active_masks(cfg: ModularModelCfg, gen: np.random.Generator, n: int) -> tuple:
    mask = gen.random((n, cfg.m)) < cfg.p
    resampled = 0
    dead = ~mask.any(axis=1)
    while dead.any():
        resampled += int(dead.sum())
        mask[dead] = gen.random((int(dead.sum()), cfg.m)) < cfg.p
        dead = ~mask.any(axis=1)
    return mask, resampled


def _sample_blocks(cfg: ModularModelCfg, frame: np.ndarray, gen: np.random.Generator, n: int) -> tuple:
    """n gradients as an [n, m, d/m] array, plus the all-inactive resample count."""
    mask, resampled = _active_masks(cfg, gen, n)
    scale = math.sqrt(cfg.sigma**2 * cfg.d / cfg.m)
    g = np.broadcast_to(frame, (n,) + frame.shape).copy()
    if cfg.rho < 1:
        z = gen.standard_normal((n, cfg.m, cfg.block))
        z -= np.sum(z * frame, axis=2, keepdims=True) * frame
        z /= np.linalg.norm(z, axis=2, keepdims=True)
        g = math.sqrt(cfg.rho) * g + math.sqrt(1.0 - cfg.rho) * z
    g *= scale
    g[~mask] = 0.0
    return g, resampled


def sample_gradient(cfg: ModularModelCfg, frame: np.ndarray, rng: RngState) -> GradVector:
    cfg.validate()
    g, resampled = _sample_blocks(cfg, frame, rng.generator(), 1)
    if resampled:
        log.info("resampled %d all-inactive draw(s)", resampled)
    return GradVector(g.reshape(-1), tuple((f"module{i}", i * cfg.block, cfg.block) for i in range(cfg.m)))


def _mean_se(x: np.ndarray) -> tuple:
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def aggregate_correlation(cfg: ModularModelCfg, set_sizes: tuple = (1, 1), trials: int | None = None, chunk_floats: int = 2**24) -> SimResult:
    """Cosine between mean gradients of two disjoint synthetic sets, over trials.

    Sizes (1, 1) is the pairwise case. Inner-product and norm statistics are
    computed on the (set-mean) vectors being compared.
    """
    cfg.validate()
    n_f, n_r = set_sizes
    if n_f < 1 or n_r < 1:
        raise ValueError("set sizes must be >= 1")
    trials = cfg.n_pairs if trials is None else trials
    root = RngState(cfg.seed, 0x6D6F6473)
    frame = sample_module_frame(cfg, root.fork("frame"))
    per_trial = (n_f + n_r) * cfg.d
    chunk = max(1, chunk_floats // per_trial)
    cos, ip, nsq, resampled = [], [], [], 0
    for c, start in enumerate(range(0, trials, chunk)):
        k = min(chunk, trials - start)
        gen = root.fork("chunk", c).generator()
        a, ra = _sample_blocks(cfg, frame, gen, k * n_f)
        b, rb = _sample_blocks(cfg, frame, gen, k * n_r)
        resampled += ra + rb
        a = a.reshape(k, n_f, cfg.d).mean(axis=1) if n_f > 1 else a.reshape(k, cfg.d)
        b = b.reshape(k, n_r, cfg.d).mean(axis=1) if n_r > 1 else b.reshape(k, cfg.d)
        dot = np.einsum("ij,ij->i", a, b)
        na = np.einsum("ij,ij->i", a, a)
        nb = np.einsum("ij,ij->i", b, b)
        cos.append(np.clip(dot / np.sqrt(na * nb), -1.0, 1.0))
        ip.append(dot)
        nsq.append(np.concatenate([na, nb]))
    if resampled:
        log.info("resampled %d all-inactive draw(s) (p=%g, m=%d)", resampled, cfg.p, cfg.m)
    cm, cse = _mean_se(np.concatenate(cos))
    im, ise = _mean_se(np.concatenate(ip))
    nm, nse = _mean_se(np.concatenate(nsq))
    return SimResult(cm, cse, cfg.p * cfg.rho, im, ise, nm, nse, trials, resampled)


def estimate_correlation(cfg: ModularModelCfg) -> SimResult:
    """Pairwise statistics over ``n_pairs`` independent gradient pairs."""
    if cfg.n_pairs < 100:
        raise ValueError("n_pairs must be >= 100")
    return aggregate_correlation(cfg, (1, 1))


def predicted_inner_product(cfg: ModularModelCfg) -> float:
    return cfg.p**2 * cfg.rho * cfg.sigma**2 * cfg.d


def predicted_norm_sq(cfg: ModularModelCfg) -> float:
    return cfg.p * cfg.sigma**2 * cfg.d


SWEEP_COLUMNS = ("m", "d", "p", "rho", "n_pairs", "empirical", "predicted", "stderr")


def sweep(cfgs, path=None) -> list:
    """Run ``estimate_correlation`` over configs; optionally write a CSV."""
    rows = []
    for cfg in cfgs:
        r = estimate_correlation(cfg)
        rows.append(dict(m=cfg.m, d=cfg.d, p=cfg.p, rho=cfg.rho, n_pairs=cfg.n_pairs,
                         empirical=r.empirical_corr_mean, predicted=r.predicted, stderr=r.standard_error))
    if path is not None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows
