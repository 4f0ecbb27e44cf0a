import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsrtl.config import SyntheticConfig
from wsrtl.data import (AURule, AURuleTable, Sample, align_face, batch_iterator, compute_au_centers,
                        estimate_similarity, generate_synthetic_dataset, read_flow, read_manifest,
                        synthetic_rule_table, transform_points, write_flow, write_manifest)
from wsrtl.data.alignment import align_frame_pair
from wsrtl.data.landmarks import fractional_to_pixels, read_landmarks, write_landmarks


def _reference(k=5, seed=0):
    return np.random.default_rng(seed).uniform(40, 160, (k, 2))


# ---------------------------------------------------------------- alignment

def test_identity_alignment_leaves_image_unchanged():
    ref = _reference()
    img = np.random.default_rng(1).random((200, 200, 3)).astype(np.float32)
    out, m = align_face(img, ref, ref)
    assert np.allclose(m, [[1, 0, 0], [0, 1, 0]], atol=1e-9)
    assert np.allclose(out, img, atol=1e-5)


def test_shifted_landmarks_give_a_pure_translation():
    ref = _reference()
    m = estimate_similarity(ref + (5, 0), ref)
    assert np.allclose(m, [[1, 0, -5], [0, 1, 0]], atol=1e-9)


def test_rotation_is_recovered():
    ref = _reference()
    c = ref.mean(0)
    rot = np.array([[0, -1], [1, 0]])
    rotated = (ref - c) @ rot.T + c
    m = estimate_similarity(rotated, ref)
    angle = np.arctan2(m[1, 0], m[0, 0])
    assert abs(angle - (-np.pi / 2)) < 1e-6
    assert np.allclose(transform_points(rotated, m), ref, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(0.5, 2.0), st.floats(-30, 30), st.floats(-30, 30), st.integers(0, 999))
def test_similarity_fit_matches_closed_form(theta, scale, tx, ty, seed):
    ref = _reference(6, seed)
    a = scale * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    src = ref @ a.T + (tx, ty)
    m = estimate_similarity(src, ref)
    assert np.allclose(transform_points(src, m), ref, atol=1e-6)
    # aligning already-aligned landmarks is the identity
    again = estimate_similarity(transform_points(src, m), ref)
    assert np.allclose(again, [[1, 0, 0], [0, 1, 0]], atol=1e-6)


def test_degenerate_landmarks_fail():
    with pytest.raises(ValueError):
        estimate_similarity(np.ones((4, 2)), _reference(4))
    with pytest.raises(ValueError):
        estimate_similarity(np.ones((1, 2)), np.ones((1, 2)))


def test_frame_pair_uses_first_frame_transform():
    ref = _reference()
    rng = np.random.default_rng(3)
    a, b = rng.random((200, 200)).astype(np.float32), rng.random((200, 200)).astype(np.float32)
    aligned_a, aligned_b, m = align_frame_pair(a, b, ref + (3, 2), ref)
    _, m_a = align_face(a, ref + (3, 2), ref)
    assert np.allclose(m, m_a)
    assert aligned_b.shape == (200, 200)


# ---------------------------------------------------------------- centers

def test_zero_offset_center_is_the_anchor():
    lm = np.array([[60.0, 70.0], [130.0, 70.0]])
    table = AURuleTable([AURule(0, 1)], 2)
    c = compute_au_centers(lm, table, (192, 192))
    assert c.tolist() == [[[60, 70], [130, 70]]]


def test_fractional_center_example():
    px = fractional_to_pixels(np.array([[0.3, 0.4], [0.7, 0.4]]), 192)
    assert px.tolist() == [[57, 76], [134, 76]]


def test_corner_center_is_clamped_inside():
    lm = np.array([[0.0, 0.0], [191.0, 191.0]])
    c = compute_au_centers(lm, AURuleTable([AURule(0, 1)], 2), (192, 192))
    for x, y in c[0]:
        assert 0 <= x - 24 and x + 24 <= 192 and 0 <= y - 24 and y + 24 <= 192


def test_center_errors():
    with pytest.raises(ValueError):
        compute_au_centers(np.zeros((3, 2)), AURuleTable([AURule(0, 1)], 2), (192, 192))
    with pytest.raises(ValueError):
        compute_au_centers(np.zeros((2, 2)), AURuleTable([AURule(0, 1)], 2), (40, 40))
    with pytest.raises(ValueError):
        AURuleTable([AURule(0, 5)], 2)


def test_offsets_mirror_for_the_right_side():
    lm = np.array([[80.0, 100.0], [111.0, 100.0]])
    table = AURuleTable([AURule(0, 1, (0.05, -0.1))], 2)
    c = compute_au_centers(lm, table, (192, 192))
    assert c[0, 0].tolist() == [90, 81] and c[0, 1].tolist() == [101, 81]


def test_rule_table_and_landmark_round_trip(tmp_path):
    table = synthetic_rule_table(4)
    table.save(tmp_path / "t.json")
    assert AURuleTable.load(tmp_path / "t.json") == table
    lm = np.array([[1.5, 2.25], [3.0, 4.0]])
    write_landmarks(tmp_path / "l.txt", lm)
    assert np.allclose(read_landmarks(tmp_path / "l.txt"), lm)


# ---------------------------------------------------------------- samples

def test_sample_invariants():
    img = np.zeros((10, 10, 3), np.float32)
    with pytest.raises(ValueError):
        Sample(img, np.array([[10.5, 1.0]]), "s")
    with pytest.raises(ValueError):
        Sample(img, np.array([[1.0, 1.0]]), "s", labels=np.zeros(2), flow_gt=np.zeros((5, 5, 2)))
    with pytest.raises(ValueError):
        Sample(img, np.array([[1.0, 1.0]]), "s", labels=None, is_labeled=True)
    s = Sample(img, np.array([[1.0, 1.0]]), "s", labels=np.zeros(2))
    with pytest.raises(ValueError):
        s.check_n_aus(3)


# ---------------------------------------------------------------- synthetic

def _small(**kw):
    base = dict(n_subjects=2, samples_per_subject=4)
    base.update(kw)
    return SyntheticConfig(**base)


def test_synthetic_is_deterministic():
    a = generate_synthetic_dataset(_small(), 6, seed=5)
    b = generate_synthetic_dataset(_small(), 6, seed=5)
    for x, y in zip(a.samples, b.samples):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.labels, y.labels)
    c = generate_synthetic_dataset(_small(), 6, seed=6)
    assert not np.array_equal(a.samples[0].image, c.samples[0].image)


def test_forced_zero_labels_draw_no_patterns():
    ds = generate_synthetic_dataset(_small(force_labels=[0]), 6, seed=1)
    for s in ds.labeled:
        assert s.labels.sum() == 0
        assert np.array_equal(s.image, s.next_image)
        assert not s.flow_gt.any()


def test_displacement_flow_is_confined_to_the_moving_au():
    cfg = _small(force_labels=[1], motion={"2": [1, 0]}, unlabeled_fraction=0.0)
    ds = generate_synthetic_dataset(cfg, 6, seed=2)
    s = ds.labeled[0]
    lm = s.landmarks
    moving = np.argwhere(np.abs(s.flow_gt).sum(-1) > 0)
    assert len(moving) == 2 * 20 * 20
    for side, sign in ((0, 1), (1, -1)):
        x, y = lm[2 + 6 * side]
        near = moving[(np.abs(moving[:, 1] - x) <= 10) & (np.abs(moving[:, 0] - y) <= 10)]
        assert len(near) == 400
        assert np.all(s.flow_gt[near[:, 0], near[:, 1], 0] == sign)


def test_synthetic_split_and_labels():
    ds = generate_synthetic_dataset(_small(unlabeled_fraction=0.5), 4, seed=0)
    assert len(ds.labeled) == len(ds.unlabeled) == 4
    assert all(not s.is_labeled and s.labels is not None for s in ds.unlabeled)
    assert all(s.flow_gt is not None for s in ds.labeled)
    assert len(ds.pairs) == len(ds.labeled)


def test_cooccurrence_and_exclusion_statistics():
    cfg = SyntheticConfig(n_subjects=10, samples_per_subject=100)
    ds = generate_synthetic_dataset(cfg, 6, seed=0)
    y = np.stack([s.labels for s in ds.samples])
    assert np.corrcoef(y[:, 0], y[:, 1])[0, 1] > 0.8
    assert not (y[:, 2] * y[:, 3]).any()


# ---------------------------------------------------------------- batches

def test_batches_without_augmentation_are_center_crops():
    ds = generate_synthetic_dataset(_small(), 6, seed=0)
    batch = next(batch_iterator(ds.labeled, 2, 0, False, ds.rule_table))
    for img, idx in zip(batch.images, batch.indices):
        assert np.array_equal(img.transpose(1, 2, 0), ds.labeled[idx].image[4:196, 4:196])
    assert not batch.flipped.any()


def test_batch_order_is_seeded_and_resumable():
    ds = generate_synthetic_dataset(_small(), 6, seed=0)
    a = [b.indices.tolist() for b in batch_iterator(ds.samples, 3, 9, True, ds.rule_table, epochs=3)]
    b = [b.indices.tolist() for b in batch_iterator(ds.samples, 3, 9, True, ds.rule_table, epochs=3)]
    assert a == b
    resumed = [b.indices.tolist() for b in batch_iterator(ds.samples, 3, 9, True, ds.rule_table, epochs=3, start=4)]
    assert resumed == a[4:]
    assert sorted(sum(a[:len(ds.samples) // 3], [])) == sorted(set(sum(a[:len(ds.samples) // 3], [])))


def test_flip_swaps_and_mirrors_centers_and_flow():
    ds = generate_synthetic_dataset(_small(unlabeled_fraction=0.0, motion={"1": [2, 1]}), 6, seed=0)
    it = batch_iterator(ds.labeled, 8, 0, True, ds.rule_table)
    from wsrtl.data.dataset import prepare_sample
    s = ds.labeled[0]
    img, c, flow = prepare_sample(s, ds.rule_table, 192, (3, 5), False)
    fimg, fc, fflow = prepare_sample(s, ds.rule_table, 192, (3, 5), True)
    assert np.array_equal(fimg, img[:, ::-1])
    assert np.array_equal(fc[:, 0, 0], 191 - c[:, 1, 0])
    assert np.array_equal(fc[:, 1], np.stack([191 - c[:, 0, 0], c[:, 0, 1]], -1))
    assert np.array_equal(fflow[..., 0], -flow[:, ::-1, 0])
    assert np.array_equal(fflow[..., 1], flow[:, ::-1, 1])
    batch = next(it)
    assert batch.images.shape == (8, 3, 192, 192)


def test_iterator_errors():
    ds = generate_synthetic_dataset(_small(), 6, seed=0)
    with pytest.raises(ValueError):
        next(batch_iterator([], 2, 0, False, ds.rule_table))
    with pytest.raises(ValueError):
        next(batch_iterator(ds.samples[:2], 3, 0, False, ds.rule_table))


# ---------------------------------------------------------------- files

def test_flow_file_round_trip_and_layout(tmp_path):
    flow = np.random.default_rng(0).normal(size=(3, 4, 2)).astype(np.float32)
    write_flow(tmp_path / "f.wflo", flow)
    blob = (tmp_path / "f.wflo").read_bytes()
    assert blob[:4] == b"WFLO"
    assert int.from_bytes(blob[4:8], "little") == 3 and int.from_bytes(blob[8:12], "little") == 4
    assert np.frombuffer(blob[12:20], "<f4").tolist() == flow[0, 0].tolist()
    assert np.array_equal(read_flow(tmp_path / "f.wflo"), flow)
    (tmp_path / "bad.wflo").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        read_flow(tmp_path / "bad.wflo")


def test_manifest_round_trip(tmp_path):
    ds = generate_synthetic_dataset(_small(), 6, seed=0)
    path = write_manifest(ds.samples, tmp_path)
    back = read_manifest(path, 6)
    assert len(back) == len(ds.samples)
    for a, b in zip(ds.samples, back):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.labels, b.labels)
        assert a.is_labeled == b.is_labeled and a.subject_id == b.subject_id
        assert (a.flow_gt is None) == (b.flow_gt is None)
        if a.flow_gt is not None:
            assert np.array_equal(a.flow_gt, b.flow_gt)


def test_manifest_intensity_threshold_and_inline_landmarks(tmp_path):
    from PIL import Image
    Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(tmp_path / "a.png")
    rec = '{"image_path": "a.png", "landmarks": [[1, 2], [3, 4]], "labels": [0, 1, 2, 3], "subject_id": 7}'
    (tmp_path / "m.jsonl").write_text(rec + "\n")
    (s,) = read_manifest(tmp_path / "m.jsonl", 4, intensity_threshold=1)
    assert s.labels.tolist() == [0, 0, 1, 1] and s.subject_id == "7"
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "m.jsonl", 5)
