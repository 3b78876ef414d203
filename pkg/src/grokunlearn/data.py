"""Dataset generators and forget/retain split construction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numkernel import RngState

OPS = {"add": lambda a, b, p: (a + b) % p, "sub": lambda a, b, p: (a - b) % p}
SPLIT_MODES = ("class_partial", "random_global", "by_local_grok_label")


@dataclass(frozen=True)
class Dataset:
    """Examples with dense integer ids.

    For ``classification`` ``inputs`` is a float (or token) array and ``labels``
    holds class ids. For ``sequence_qa`` ``inputs`` holds key tokens [n, key_len]
    and ``labels`` the answer tokens [n, val_len].
    """

    inputs: np.ndarray
    labels: np.ndarray
    example_ids: np.ndarray
    kind: str = "classification"
    n_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.inputs)
        if len(self.labels) != n or len(self.example_ids) != n:
            raise ValueError("inputs, labels and ids must have equal length")
        if not np.array_equal(np.sort(self.example_ids), np.arange(n)):
            raise ValueError("example ids must be unique and dense in [0, n)")
        if n and self.n_classes and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside class/vocab range")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, ids) -> "Dataset":
        """Rows with the given ids, re-indexed densely; original ids kept in meta."""
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.empty(len(self), dtype=np.int64)
        pos[self.example_ids] = np.arange(len(self))
        rows = pos[ids]
        meta = dict(self.meta, source_ids=ids)
        return replace(
            self,
            inputs=self.inputs[rows],
            labels=self.labels[rows],
            example_ids=np.arange(len(ids)),
            meta=meta,
        )

    def sequences(self) -> np.ndarray:
        if self.kind != "sequence_qa":
            raise ValueError("sequences() needs a sequence_qa dataset")
        return np.concatenate([self.inputs, self.labels], axis=1)


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    return all(n % k for k in range(2, int(math.isqrt(n)) + 1))


def modular_pairs(p: int, operation: str = "add") -> tuple:
    a, b = np.divmod(np.arange(p * p), p)
    return a, b, OPS[operation](a, b, p)


def encode_modular(a, b, p: int, encoding: str, operation: str = "add") -> np.ndarray:
    if encoding == "onehot":
        x = np.zeros((len(a), 2 * p), dtype=np.float32)
        x[np.arange(len(a)), a] = 1.0
        x[np.arange(len(a)), p + b] = 1.0
        return x
    if encoding == "tokens":
        op_tok, eq_tok = p, p + 1
        return np.stack([a, np.full_like(a, op_tok), b, np.full_like(a, eq_tok)], axis=1).astype(np.int64)
    raise ValueError(f"unknown encoding {encoding!r}")


def gen_modular_arithmetic(
    p: int, operation: str = "add", train_fraction: float = 0.5, seed: int = 0, encoding: str = "onehot"
) -> tuple:
    """All p^2 pairs (a, b) labelled (a op b) mod p, shuffled and split.

    ``onehot`` encodes a pair as two concatenated one-hot blocks (mlp input,
    width 2p); ``tokens`` as [a, op, b, =] with vocabulary p + 2.
    """
    if not is_prime(p):
        raise ValueError(f"{p} is not prime")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    if operation not in OPS:
        raise ValueError(f"unknown operation {operation!r}")
    a, b, y = modular_pairs(p, operation)
    order = RngState(seed, 0x6D6F64).generator().permutation(p * p)
    n_train = int(round(train_fraction * p * p))
    x = encode_modular(a, b, p, encoding, operation)
    meta = {"p": p, "operation": operation, "encoding": encoding, "input_range": (0.0, 1.0)}

    def make(idx):
        return Dataset(x[idx], y[idx].astype(np.int64), np.arange(len(idx)), "classification", p, dict(meta, pairs=np.stack([a[idx], b[idx]], 1)))

    return make(order[:n_train]), make(order[n_train:])


def gen_toy_images(
    classes: int = 10,
    per_class: int = 100,
    dims: tuple = (1, 8, 8),
    noise_sigma: float = 0.1,
    seed: int = 0,
    test_per_class: int | None = None,
    blobs: int = 3,
) -> tuple:
    """Class-conditional Gaussian-blob images in [0, 1].

    Each class owns a template made of ``blobs`` Gaussian bumps at random
    positions; samples are the template plus i.i.d. pixel noise, clipped.
    """
    if classes < 4:
        raise ValueError("need at least 4 classes")
    c, h, w = dims
    gen = RngState(seed, 0x696D67).generator()
    yy, xx = np.mgrid[0:h, 0:w]
    templates = np.zeros((classes, c, h, w))
    for k in range(classes):
        for ch in range(c):
            for _ in range(blobs):
                cy, cx = gen.uniform(0, h), gen.uniform(0, w)
                s = gen.uniform(0.8, 2.0)
                templates[k, ch] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        templates[k] /= max(templates[k].max(), 1e-9)

    def sample(n_per):
        y = np.repeat(np.arange(classes), n_per)
        x = templates[y] + noise_sigma * gen.normal(size=(len(y), c, h, w))
        order = gen.permutation(len(y))
        x = np.clip(x[order], 0.0, 1.0).astype(np.float32)
        meta = {"input_range": (0.0, 1.0), "templates": templates.astype(np.float32)}
        return Dataset(x, y[order].astype(np.int64), np.arange(len(y)), "classification", classes, meta)

    train = sample(per_class)
    test = sample(per_class if test_per_class is None else test_per_class)
    return train, test


def gen_kv_qa(n_facts: int, key_len: int, val_len: int, vocab: int, seed: int = 0, max_retries: int = 1000) -> Dataset:
    """Random key -> value token facts; keys and values are each pairwise distinct."""
    if n_facts < 1 or key_len < 1 or val_len < 1:
        raise ValueError("n_facts, key_len and val_len must be positive")
    if vocab <= max(key_len, val_len) or vocab < 2:
        raise ValueError("vocab too small")
    gen = RngState(seed, 0x6B76).generator()

    def draw(length):
        seen, rows, retries = set(), [], 0
        while len(rows) < n_facts:
            row = tuple(int(t) for t in gen.integers(0, vocab, size=length))
            if row in seen:
                retries += 1
                if retries > max_retries:
                    raise RuntimeError("could not draw distinct sequences; enlarge vocab or length")
                continue
            seen.add(row)
            rows.append(row)
        return np.array(rows, dtype=np.int64)

    keys, vals = draw(key_len), draw(val_len)
    return Dataset(keys, vals, np.arange(n_facts), "sequence_qa", vocab, {"key_len": key_len, "val_len": val_len})


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "class_partial"
    forget_fraction: float = 0.15
    target_classes: tuple = ()
    seed: int = 0
    grok_group: str = "grokked"
    forget_count: int | None = None

    def validate(self) -> "SplitSpec":
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"unknown split mode {self.mode!r}")
        if not 0 < self.forget_fraction < 1:
            raise ValueError("forget_fraction must be in (0, 1)")
        if self.mode == "class_partial" and not self.target_classes:
            raise ValueError("class_partial needs target classes")
        return self


@dataclass(frozen=True)
class DataSplit:
    retain_ids: np.ndarray
    forget_ids: np.ndarray
    test_ids: np.ndarray

    def __post_init__(self):
        r, f = set(self.retain_ids.tolist()), set(self.forget_ids.tolist())
        if r & f:
            raise ValueError("retain and forget overlap")


def _take(n: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * n)))


def make_split(dataset: Dataset, spec: SplitSpec, aux=None, test: Dataset | None = None) -> DataSplit:
    """Partition training ids into retain/forget.

    ``aux`` holds one local-grokking label per example for
    ``by_local_grok_label`` mode. Test ids index the separate test dataset, so
    they can never collide with training data.
    """
    spec.validate()
    gen = RngState(spec.seed, 0x73706C).generator()
    ids = dataset.example_ids
    if spec.mode == "class_partial":
        if dataset.kind != "classification":
            raise ValueError("class_partial needs a classification dataset")
        forget = []
        for c in spec.target_classes:
            members = np.sort(ids[dataset.labels == c])
            if members.size == 0:
                raise ValueError(f"target class {c} absent from dataset")
            forget.append(gen.choice(members, _take(members.size, spec.forget_fraction), replace=False))
        forget = np.concatenate(forget)
    elif spec.mode == "random_global":
        forget = gen.choice(np.sort(ids), _take(ids.size, spec.forget_fraction), replace=False)
    else:
        if aux is None:
            raise ValueError("by_local_grok_label needs local-grokking labels")
        labels = np.asarray(aux)
        pool = np.sort(ids[labels == spec.grok_group])
        k = spec.forget_count if spec.forget_count is not None else _take(ids.size, spec.forget_fraction)
        if pool.size < k:
            raise ValueError(f"only {pool.size} {spec.grok_group!r} examples, need {k}")
        forget = gen.choice(pool, k, replace=False)
    forget = np.sort(forget.astype(np.int64))
    retain = np.setdiff1d(ids, forget)
    test_ids = np.arange(len(test)) if test is not None else np.zeros(0, dtype=np.int64)
    return DataSplit(retain, forget, test_ids)


def export_records(dataset: Dataset, path) -> Path:
    """One JSON object per line: {"id", "input", "label"}."""
    path = Path(path)
    with path.open("w") as fh:
        for i in range(len(dataset)):
            rec = {"id": int(dataset.example_ids[i]), "input": dataset.inputs[i].tolist(), "label": np.asarray(dataset.labels[i]).tolist()}
            fh.write(json.dumps(rec) + "\n")
    return path


def import_records(path, kind: str = "classification", n_classes: int = 0) -> Dataset:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    rows.sort(key=lambda r: r["id"])
    inputs = np.array([r["input"] for r in rows])
    labels = np.array([r["label"] for r in rows], dtype=np.int64)
    if inputs.dtype.kind == "f":
        inputs = inputs.astype(np.float32)
    return Dataset(inputs, labels, np.array([r["id"] for r in rows]), kind, n_classes)
