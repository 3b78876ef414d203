import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grokunlearn import data
from grokunlearn.data import SplitSpec


def test_modular_sizes_and_labels():
    tr, te = data.gen_modular_arithmetic(97, "add", 0.5, seed=0)
    assert len(tr) + len(te) == 97 * 97
    assert len(tr) == round(0.5 * 97 * 97)
    for ds in (tr, te):
        a, b = ds.meta["pairs"].T
        np.testing.assert_array_equal(ds.labels, (a + b) % 97)
        np.testing.assert_array_equal(ds.inputs.argmax(1), a)
        np.testing.assert_array_equal(ds.inputs[:, 97:].argmax(1), b)
    pairs = {tuple(r) for r in tr.meta["pairs"]} | {tuple(r) for r in te.meta["pairs"]}
    assert len(pairs) == 97 * 97


def test_modular_tokens_and_sub():
    tr, _ = data.gen_modular_arithmetic(7, "sub", 0.5, seed=1, encoding="tokens")
    a, b = tr.meta["pairs"].T
    np.testing.assert_array_equal(tr.labels, (a - b) % 7)
    assert (tr.inputs[:, 1] == 7).all() and (tr.inputs[:, 3] == 8).all()


def test_modular_rejects_composite_and_bad_fraction():
    with pytest.raises(ValueError):
        data.gen_modular_arithmetic(91)
    with pytest.raises(ValueError):
        data.gen_modular_arithmetic(7, train_fraction=1.0)


def test_modular_deterministic_per_seed():
    a, _ = data.gen_modular_arithmetic(11, seed=3)
    b, _ = data.gen_modular_arithmetic(11, seed=3)
    c, _ = data.gen_modular_arithmetic(11, seed=4)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.meta["pairs"], c.meta["pairs"])


def test_toy_images():
    tr, te = data.gen_toy_images(classes=5, per_class=10, dims=(1, 8, 8), seed=0, test_per_class=4)
    assert tr.inputs.shape == (50, 1, 8, 8) and len(te) == 20
    assert tr.inputs.min() >= 0 and tr.inputs.max() <= 1
    assert np.bincount(tr.labels).tolist() == [10] * 5
    with pytest.raises(ValueError):
        data.gen_toy_images(classes=3)


def test_kv_qa_distinct_keys_and_values():
    qa = data.gen_kv_qa(50, 2, 3, vocab=16, seed=0)
    assert len({tuple(k) for k in qa.inputs}) == 50
    assert len({tuple(v) for v in qa.labels}) == 50
    assert qa.sequences().shape == (50, 5)
    with pytest.raises(RuntimeError):
        data.gen_kv_qa(10, 1, 1, vocab=4, seed=0, max_retries=20)


def test_dataset_rejects_bad_ids_and_labels():
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 1)), np.zeros(2, int), np.array([0, 0]))
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 1)), np.array([0, 5]), np.arange(2), n_classes=3)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.95), st.integers(0, 1000), st.sampled_from(["class_partial", "random_global"]))
def test_split_partition_property(frac, seed, mode):
    tr, te = data.gen_modular_arithmetic(11, seed=0)
    spec = SplitSpec(mode, frac, target_classes=(0, 3), seed=seed)
    s = data.make_split(tr, spec, test=te)
    assert not set(s.forget_ids) & set(s.retain_ids)
    assert sorted(np.concatenate([s.forget_ids, s.retain_ids]).tolist()) == list(range(len(tr)))
    np.testing.assert_array_equal(s.test_ids, np.arange(len(te)))
    if mode == "class_partial":
        assert set(tr.labels[s.forget_ids]) <= {0, 3}
        for c in (0, 3):
            n = int((tr.labels == c).sum())
            assert int((tr.labels[s.forget_ids] == c).sum()) == max(1, int(np.floor(frac * n)))
    else:
        assert len(s.forget_ids) == max(1, int(np.floor(frac * len(tr))))


def test_split_by_local_grok_label():
    tr, _ = data.gen_modular_arithmetic(11, seed=0)
    labels = np.array(["grokked" if i % 3 else "ungrokked" for i in range(len(tr))], dtype=object)
    s = data.make_split(tr, SplitSpec("by_local_grok_label", 0.1, grok_group="ungrokked"), aux=labels)
    assert (labels[s.forget_ids] == "ungrokked").all()
    with pytest.raises(ValueError):
        data.make_split(tr, SplitSpec("by_local_grok_label", 0.1))
    with pytest.raises(ValueError):
        data.make_split(tr, SplitSpec("by_local_grok_label", 0.1, forget_count=10_000), aux=labels)


def test_split_errors():
    tr, _ = data.gen_modular_arithmetic(11, seed=0)
    with pytest.raises(ValueError):
        data.make_split(tr, SplitSpec("class_partial", 0.1))
    with pytest.raises(ValueError):
        data.make_split(tr, SplitSpec("class_partial", 0.1, target_classes=(42,)))
    with pytest.raises(ValueError):
        SplitSpec("bogus").validate()


def test_subset_keeps_source_ids():
    tr, _ = data.gen_modular_arithmetic(11, seed=0)
    sub = tr.subset([5, 2])
    np.testing.assert_array_equal(sub.meta["source_ids"], [5, 2])
    np.testing.assert_array_equal(sub.labels, tr.labels[[5, 2]])


def test_export_import_roundtrip(tmp_path):
    tr, _ = data.gen_modular_arithmetic(5, seed=0)
    path = data.export_records(tr, tmp_path / "tr.jsonl")
    back = data.import_records(path, n_classes=5)
    np.testing.assert_array_equal(back.inputs, tr.inputs)
    np.testing.assert_array_equal(back.labels, tr.labels)
