import csv
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmqfed.data import (
    MissingSpec,
    MultimodalDataset,
    export_csv,
    gen_synthetic,
    inject_missing,
    load_features,
    save_features,
)
from mmqfed.errors import FormatError, StructuralError
from mmqfed.model import ModalitySpec

SPECS = [ModalitySpec("a", 4, 2), ModalitySpec("b", 3, 2), ModalitySpec("c", 2, 1)]


def test_generator_is_deterministic():
    a = gen_synthetic(50, SPECS, 3, 2.0, 0.3, seed=4)
    b = gen_synthetic(50, SPECS, 3, 2.0, 0.3, seed=4)
    assert a.equals(b)
    assert not a.equals(gen_synthetic(50, SPECS, 3, 2.0, 0.3, seed=5))


def test_generator_shapes_and_context():
    d = gen_synthetic(30, SPECS, 3, seed=0)
    assert [f.shape for f in d.features] == [(30, 4), (30, 3), (30, 2)]
    assert np.all(d.context == 1)
    assert np.bincount(d.labels).tolist() == [10, 10, 10]


def test_single_class_constant_classifier_is_perfect():
    d = gen_synthetic(12, SPECS[:1], 1, seed=0)
    assert np.all(d.labels == 0)


def test_generator_errors():
    with pytest.raises(StructuralError):
        gen_synthetic(2, SPECS, 3)
    with pytest.raises(StructuralError):
        gen_synthetic(10, SPECS, 3, class_separation=0.0)
    with pytest.raises(StructuralError):
        gen_synthetic(10, SPECS, 3, cross_modal_weight=1.5)


def _centroid_accuracy(x, y, C):
    # nearest class mean, fit and scored on the same data
    means = np.stack([x[y == c].mean(axis=0) for c in range(C)])
    pred = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    return float(np.mean(pred == y))


def _nearest_cluster(x, k=3, iters=50):
    rng = np.random.default_rng(0)
    cent = x[rng.choice(len(x), k, replace=False)]
    for _ in range(iters):
        lab = np.argmin(((x[:, None] - cent[None]) ** 2).sum(-1), axis=1)
        cent = np.stack([x[lab == j].mean(0) if np.any(lab == j) else cent[j] for j in range(k)])
    return lab


def _table_accuracy(codes, y):
    # best classifier that only sees the discrete code: majority label per code
    hits = 0
    for c in np.unique(codes):
        hits += np.bincount(y[codes == c]).max()
    return hits / len(y)


def test_cross_modal_weight_moves_signal_between_modalities():
    specs = [ModalitySpec("a", 4, 2), ModalitySpec("b", 4, 2)]
    alone = gen_synthetic(3000, specs, 3, 3.0, 0.0, seed=1, noise_scale=0.5)
    joint = gen_synthetic(3000, specs, 3, 3.0, 1.0, seed=1, noise_scale=0.5)
    # w = 0: one modality suffices
    assert _centroid_accuracy(alone.features[0], alone.labels, 3) > 0.95
    # w = 1: each modality alone is uninformative, the pair determines the class
    ka, kb = (_nearest_cluster(f) for f in joint.features)
    assert _table_accuracy(ka, joint.labels) < 0.4
    assert _table_accuracy(kb, joint.labels) < 0.4
    assert _table_accuracy(3 * ka + kb, joint.labels) > 0.95


def test_missing_counts_example():
    d = gen_synthetic(100, SPECS, 3, seed=0)
    out, report = inject_missing(d, MissingSpec([0.2, 0.0, 0.0], seed=1))
    assert (out.context[:, 0] == 0).sum() == 20
    assert report.missing_counts == [20, 0, 0]


def test_zero_fraction_leaves_dataset_unchanged():
    d = gen_synthetic(40, SPECS, 3, seed=0)
    out, _ = inject_missing(d, MissingSpec([0, 0, 0], seed=3))
    assert out.equals(d)


def test_one_percent_condition():
    specs = [ModalitySpec("a", 2, 1), ModalitySpec("b", 2, 1), ModalitySpec("c", 2, 1)]
    d = gen_synthetic(23500, specs, 6, seed=0)
    out, report = inject_missing(d, MissingSpec([0.01, 0.01, 0.01], seed=0))
    assert report.missing_counts == [235, 235, 235]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 120), st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 1000))
def test_missing_counts_exact_and_never_empty(n, fractions, seed):
    d = gen_synthetic(max(n, 3), SPECS, 3, seed=seed)
    n = len(d)
    out, report = inject_missing(d, MissingSpec(fractions, seed=seed))
    assert np.all(out.context.sum(axis=1) >= 1)
    for m, f in enumerate(fractions):
        target = int(np.floor(f * n + 0.5 + 1e-9))
        assert report.missing_counts[m] + report.per_modality_kept[m] == target
    assert report.kept_to_avoid_empty == sum(report.per_modality_kept)


def test_garbage_modes():
    d = gen_synthetic(50, SPECS, 3, seed=0)
    z, _ = inject_missing(d, MissingSpec([0.5, 0, 0], garbage="zeros", seed=2))
    miss = z.context[:, 0] == 0
    assert np.all(z.features[0][miss] == 0)
    g, _ = inject_missing(d, MissingSpec([0.5, 0, 0], seed=2, sigma=3.0))
    assert np.all(g.features[0][g.context[:, 0] == 0] != d.features[0][g.context[:, 0] == 0])
    np.testing.assert_array_equal(g.features[1], d.features[1])


def test_select_modalities_drops_empty_samples():
    d = gen_synthetic(30, SPECS, 3, seed=0)
    d, _ = inject_missing(d, MissingSpec([0.0, 0.5, 0.0], seed=0))
    only_b = d.select_modalities([1])
    assert len(only_b) == 15 and only_b.num_modalities == 1


# --- MMQF container ------------------------------------------------------------

def test_round_trip(tmp_path):
    d = gen_synthetic(25, SPECS, 3, seed=0)
    d, _ = inject_missing(d, MissingSpec([0.2, 0.2, 0.0], seed=0))
    save_features(d, tmp_path / "d.mmqf")
    assert load_features(tmp_path / "d.mmqf").equals(d)


def test_layout_is_as_documented(tmp_path):
    d = gen_synthetic(3, SPECS[:2], 3, seed=0)
    save_features(d, tmp_path / "d.mmqf")
    blob = (tmp_path / "d.mmqf").read_bytes()
    assert blob[:4] == b"MMQF"
    version, jlen = struct.unpack_from("<HI", blob, 4)
    assert version == 1
    meta = json.loads(blob[10 : 10 + jlen])
    assert meta["num_samples"] == 3 and meta["num_classes"] == 3
    pos = 10 + jlen
    first = np.frombuffer(blob, "<f8", 7, pos)
    np.testing.assert_array_equal(first, np.concatenate([d.features[0][0], d.features[1][0]]))
    pos += 8 * 3 * 7
    np.testing.assert_array_equal(np.frombuffer(blob, "<u4", 3, pos), d.labels)
    assert blob[pos + 12 :] == bytes(d.context.reshape(-1))


def test_truncated_file(tmp_path):
    d = gen_synthetic(10, SPECS, 3, seed=0)
    save_features(d, tmp_path / "d.mmqf")
    blob = (tmp_path / "d.mmqf").read_bytes()
    for cut in (2, 8, 40, len(blob) - 1):
        (tmp_path / "t.mmqf").write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_features(tmp_path / "t.mmqf")


def _rewrite_meta(blob, mutate):
    _, jlen = struct.unpack_from("<HI", blob, 4)
    meta = json.loads(blob[10 : 10 + jlen])
    mutate(meta)
    mb = json.dumps(meta).encode()
    return blob[:4] + struct.pack("<HI", 1, len(mb)) + mb + blob[10 + jlen :]


def test_zero_classes_rejected(tmp_path):
    d = gen_synthetic(10, SPECS, 3, seed=0)
    save_features(d, tmp_path / "d.mmqf")
    blob = _rewrite_meta((tmp_path / "d.mmqf").read_bytes(), lambda m: m.update(num_classes=0))
    (tmp_path / "c0.mmqf").write_bytes(blob)
    with pytest.raises(FormatError) as info:
        load_features(tmp_path / "c0.mmqf")
    assert info.value.offset == 10


def test_bad_version_and_magic(tmp_path):
    d = gen_synthetic(10, SPECS, 3, seed=0)
    save_features(d, tmp_path / "d.mmqf")
    blob = (tmp_path / "d.mmqf").read_bytes()
    (tmp_path / "v.mmqf").write_bytes(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(FormatError) as info:
        load_features(tmp_path / "v.mmqf")
    assert info.value.offset == 4
    (tmp_path / "m.mmqf").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        load_features(tmp_path / "m.mmqf")


def test_label_out_of_range_offset(tmp_path):
    d = gen_synthetic(10, SPECS, 3, seed=0)
    save_features(d, tmp_path / "d.mmqf")
    blob = bytearray((tmp_path / "d.mmqf").read_bytes())
    _, jlen = struct.unpack_from("<HI", blob, 4)
    lab = 10 + jlen + 8 * 10 * 9
    struct.pack_into("<I", blob, lab + 4 * 2, 7)
    (tmp_path / "l.mmqf").write_bytes(bytes(blob))
    with pytest.raises(FormatError) as info:
        load_features(tmp_path / "l.mmqf")
    assert info.value.offset == lab + 8


def test_dataset_validation():
    with pytest.raises(StructuralError):
        MultimodalDataset([np.zeros((3, 2))], [0, 1, 5], np.ones((3, 1)), [ModalitySpec("a", 2, 1)], 3)
    with pytest.raises(StructuralError):
        MultimodalDataset([np.zeros((3, 3))], [0, 1, 1], np.ones((3, 1)), [ModalitySpec("a", 2, 1)], 3)


def test_export_csv(tmp_path):
    d = gen_synthetic(6, SPECS, 3, seed=0)
    export_csv(d, tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["index", "label", "ctx_a", "ctx_b", "ctx_c"]
    assert len(rows) == 7
