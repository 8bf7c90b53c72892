import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oodrecover import (
    Episode,
    Pose2,
    build_recovery_dataset,
    extract_sequences,
    load_episodes,
    restore,
    save_episodes,
    transform_keypoints,
    zero_out,
)
from oodrecover.data import DatasetError, Sequence


def make_episode(rng, template, t_len, start=(100.0, 100.0, 0.0), drift=2.0):
    poses = []
    x, y, th = start
    for _ in range(t_len):
        poses.append([x, y, th])
        x += rng.uniform(-drift, drift)
        y += rng.uniform(-drift, drift)
        th += rng.uniform(-0.1, 0.1)
    poses = np.asarray(poses)
    kps = np.stack([transform_keypoints(Pose2.from_array(p), template) for p in poses])
    actions = rng.uniform(0, 512, size=(t_len, 2))
    proprios = rng.uniform(0, 512, size=(t_len, 2))
    return Episode(keypoints=kps, obj_poses=poses, actions=actions, proprios=proprios,
                   meta={"seed": 1})


@pytest.fixture()
def template():
    return np.array([[0.0, 0.0], [10.0, 0.0], [-10.0, 0.0], [0.0, -8.0], [3.0, 4.0]])


# ---------------------------------------------------------------------------
# build_recovery_dataset


def test_build_recovery_identity_pose_gives_template(template):
    t_len = 4
    poses = np.zeros((t_len, 3))
    kps = np.zeros((t_len, len(template), 2))
    ep = Episode(keypoints=kps, obj_poses=poses, actions=np.zeros((t_len, 2)),
                 proprios=np.zeros((t_len, 2)))
    rec = build_recovery_dataset([ep], template)
    for t in range(t_len):
        assert np.allclose(rec[0].keypoints[t], template)


def test_build_recovery_single_step(template):
    ep = Episode(
        keypoints=np.zeros((1, 5, 2)),
        obj_poses=np.array([[5.0, 6.0, 0.3]]),
        actions=np.zeros((1, 2)),
        proprios=np.zeros((1, 2)),
    )
    rec = build_recovery_dataset([ep], template)
    assert len(rec) == 1 and len(rec[0]) == 1


def test_build_recovery_matches_geom_oracle(template):
    rng = np.random.default_rng(0)
    ep = make_episode(rng, template, 6)
    rec = build_recovery_dataset([ep], template)[0]
    for t in range(6):
        pose = Pose2.from_array(ep.obj_poses[t])
        expected = pose.transform(template)  # geom oracle
        assert np.allclose(rec.keypoints[t], expected, atol=1e-9)


def test_build_recovery_empty_errors(template):
    with pytest.raises(ValueError):
        build_recovery_dataset([], template)


# ---------------------------------------------------------------------------
# extract_sequences


def test_extract_sequences_counts(template):
    rng = np.random.default_rng(1)
    eps = [make_episode(rng, template, t) for t in (8, 10, 3)]
    seqs, skipped = extract_sequences(eps, 8)
    # index-arithmetic oracle: sum of max(0, T - L + 1)
    assert len(seqs) == (8 - 8 + 1) + (10 - 8 + 1) + 0
    assert skipped == 1


def test_extract_sequences_windows_are_stride_one(template):
    rng = np.random.default_rng(2)
    ep = make_episode(rng, template, 7)
    seqs, _ = extract_sequences([ep], 5)
    assert len(seqs) == 3
    for j, seq in enumerate(seqs):
        assert np.array_equal(seq.keypoints, ep.keypoints[j : j + 5])
        assert np.array_equal(seq.actions, ep.actions[j : j + 5])
        assert np.array_equal(seq.proprio0, ep.proprios[j])
        assert seq.start_pose == Pose2.from_array(ep.obj_poses[j])


def test_extract_sequences_bad_horizon(template):
    with pytest.raises(ValueError):
        extract_sequences([], 0)


# ---------------------------------------------------------------------------
# zero_out


def rigid(seq: Sequence, g: Pose2) -> Sequence:
    return Sequence(
        keypoints=g.transform(seq.keypoints),
        actions=g.transform(seq.actions),
        proprio0=g.transform(seq.proprio0),
        start_pose=g.compose(seq.start_pose),
    )


def seq_close(a: Sequence, b, tol=1e-9) -> bool:
    return (
        np.max(np.abs(a.keypoints - b.keypoints)) < tol
        and np.max(np.abs(a.actions - b.actions)) < tol
        and np.max(np.abs(a.proprio0 - b.proprio0)) < tol
    )


def test_zero_out_identity_start_is_noop(template):
    rng = np.random.default_rng(3)
    ep = make_episode(rng, template, 6, start=(0.0, 0.0, 0.0), drift=0.0)
    seqs, _ = extract_sequences([ep], 6)
    z = zero_out(seqs[0])
    assert seq_close(z, seqs[0])


def test_zero_out_first_frame_is_template(template):
    rng = np.random.default_rng(4)
    ep = make_episode(rng, template, 9, start=(200.0, 150.0, 1.2))
    seqs, _ = extract_sequences([ep], 4)
    for seq in seqs:
        z = zero_out(seq)
        assert np.max(np.abs(z.keypoints[0] - template)) < 1e-9


@settings(max_examples=50)
@given(st.floats(-300, 300), st.floats(-300, 300), st.floats(-math.pi, math.pi))
def test_zero_out_equivariance(gx, gy, gth):
    template = np.array([[0.0, 0.0], [10.0, 0.0], [-10.0, 0.0], [0.0, -8.0], [3.0, 4.0]])
    rng = np.random.default_rng(5)
    ep = make_episode(rng, template, 5, start=(50.0, 80.0, 0.4))
    seq = extract_sequences([ep], 5)[0][0]
    g = Pose2(gx, gy, gth)
    z1 = zero_out(seq)
    z2 = zero_out(rigid(seq, g))
    assert seq_close(z1, z2)


def test_zero_out_round_trip(template):
    rng = np.random.default_rng(6)
    ep = make_episode(rng, template, 6, start=(220.0, 90.0, -2.0))
    seq = extract_sequences([ep], 6)[0][0]
    back = restore(zero_out(seq))
    assert seq_close(back, seq)
    assert back.start_pose == seq.start_pose


# ---------------------------------------------------------------------------
# persistence


def test_save_load_round_trip_bit_exact(tmp_path, template):
    rng = np.random.default_rng(7)
    eps = [make_episode(rng, template, t) for t in (5, 9)]
    path = tmp_path / "demos.jsonl"
    save_episodes(path, eps, kind="base")
    loaded, header = load_episodes(path)
    assert header["kind"] == "base"
    assert header["n_episodes"] == 2
    assert len(loaded) == 2
    for a, b in zip(eps, loaded):
        assert np.array_equal(a.keypoints, b.keypoints)
        assert np.array_equal(a.obj_poses, b.obj_poses)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.proprios, b.proprios)
        assert a.meta == b.meta


def test_load_empty_file_errors(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DatasetError, match="no records"):
        load_episodes(path)


def test_load_corrupted_line_names_line_number(tmp_path, template):
    rng = np.random.default_rng(8)
    path = tmp_path / "demos.jsonl"
    save_episodes(path, [make_episode(rng, template, 4)], kind="base")
    lines = path.read_text().splitlines()
    lines[3] = lines[3][:20] + "#corrupted"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="line 4"):
        load_episodes(path)


def test_load_bad_schema_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"schema": "other"}) + "\n")
    with pytest.raises(DatasetError, match="schema"):
        load_episodes(path)


def test_load_missing_file_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_episodes(tmp_path / "nope.jsonl")


def test_save_empty_errors(tmp_path):
    with pytest.raises(ValueError):
        save_episodes(tmp_path / "x.jsonl", [])
