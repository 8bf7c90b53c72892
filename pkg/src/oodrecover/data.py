"""Episode recording, window extraction, frame zeroing, and persistence.

Episodes are stored columnar: ``T`` aligned rows of keypoints, object pose,
action, and proprioception. Files are line-oriented JSON with a versioned
header, one record per step; floats round-trip exactly through their decimal
representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose2, as_keypoints, transform_keypoints

SCHEMA = "push-episodes"
SCHEMA_VERSION = 1


class DatasetError(ValueError):
    """Raised for unreadable, malformed, or inconsistent episode files."""

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


@dataclass
class Episode:
    """One rollout: aligned per-step keypoints, object pose, action, proprio."""

    keypoints: np.ndarray  # (T, n, 2)
    obj_poses: np.ndarray  # (T, 3) x, y, theta
    actions: np.ndarray    # (T, 2)
    proprios: np.ndarray   # (T, 2)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = self.actions.shape[0]
        if t < 1:
            raise ValueError("episode must contain at least one step")
        if not (
            self.keypoints.shape[0] == self.obj_poses.shape[0]
            == self.proprios.shape[0] == t
        ):
            raise ValueError("episode columns have mismatched lengths")

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[1]

    def pose_at(self, t: int) -> Pose2:
        return Pose2.from_array(self.obj_poses[t])


@dataclass
class Sequence:
    """A length-L training window in world coordinates."""

    keypoints: np.ndarray  # (L, n, 2)
    actions: np.ndarray    # (L, 2)
    proprio0: np.ndarray   # (2,) proprioception at the first frame
    start_pose: Pose2      # object pose at the first frame


@dataclass
class ZeroedSequence:
    """A window re-expressed in the frame of its initial object pose."""

    keypoints: np.ndarray  # (L, n, 2)
    actions: np.ndarray    # (L, 2)
    proprio0: np.ndarray   # (2,)
    source_frame: Pose2    # pose that maps this back to world coordinates


def build_recovery_dataset(demos: list[Episode], template) -> list[Episode]:
    """Recompute keypoints from ground-truth object poses.

    The simulator already emits pose-consistent keypoints, so this mainly
    guards the invariant that keypoints equal the transformed template and
    re-derives them for datasets where the observation was recorded by some
    other means.
    """
    if not demos:
        raise ValueError("no demonstrations given")
    tmpl = as_keypoints(template)
    out = []
    for ep in demos:
        kps = np.stack(
            [transform_keypoints(Pose2.from_array(p), tmpl) for p in ep.obj_poses]
        )
        out.append(
            Episode(
                keypoints=kps,
                obj_poses=ep.obj_poses.copy(),
                actions=ep.actions.copy(),
                proprios=ep.proprios.copy(),
                meta=dict(ep.meta),
            )
        )
    return out


def extract_sequences(episodes: list[Episode], horizon: int) -> tuple[list[Sequence], int]:
    """All stride-1 windows of length ``horizon`` within each episode.

    Episodes shorter than the horizon are skipped; the second return value
    counts them.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    seqs: list[Sequence] = []
    skipped = 0
    for ep in episodes:
        t_len = len(ep)
        if t_len < horizon:
            skipped += 1
            continue
        for j in range(t_len - horizon + 1):
            seqs.append(
                Sequence(
                    keypoints=ep.keypoints[j : j + horizon],
                    actions=ep.actions[j : j + horizon],
                    proprio0=ep.proprios[j],
                    start_pose=ep.pose_at(j),
                )
            )
    return seqs, skipped


def zero_out(seq: Sequence) -> ZeroedSequence:
    """Map keypoints, actions, and proprioception through the inverse of the
    window's initial object pose, so every zeroed window starts at the
    keypoint template in the identity frame."""
    inv = seq.start_pose.inverse()
    return ZeroedSequence(
        keypoints=inv.transform(seq.keypoints),
        actions=inv.transform(seq.actions),
        proprio0=inv.transform(seq.proprio0),
        source_frame=seq.start_pose,
    )


def restore(zseq: ZeroedSequence) -> Sequence:
    """Undo :func:`zero_out` by applying the recorded source frame."""
    g = zseq.source_frame
    return Sequence(
        keypoints=g.transform(zseq.keypoints),
        actions=g.transform(zseq.actions),
        proprio0=g.transform(zseq.proprio0),
        start_pose=g,
    )


# ---------------------------------------------------------------------------
# persistence


def save_episodes(path, episodes: list[Episode], kind: str = "base") -> None:
    if not episodes:
        raise ValueError("refusing to save an empty episode list")
    n = episodes[0].n_keypoints
    header = {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "kind": kind,
        "n_keypoints": n,
        "n_episodes": len(episodes),
    }
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for i, ep in enumerate(episodes):
            if ep.n_keypoints != n:
                raise ValueError("episodes disagree on keypoint count")
            f.write(json.dumps({"ep": i, "meta": ep.meta}, sort_keys=True) + "\n")
            for t in range(len(ep)):
                rec = {
                    "ep": i,
                    "t": t,
                    "keypoints": ep.keypoints[t].tolist(),
                    "obj_pose": ep.obj_poses[t].tolist(),
                    "action": ep.actions[t].tolist(),
                    "proprio": ep.proprios[t].tolist(),
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_episodes(path) -> tuple[list[Episode], dict]:
    """Load an episode file; returns ``(episodes, header)``."""
    try:
        f = open(path, "r")
    except OSError as e:
        raise DatasetError(f"cannot open {path}: {e}", path=path) from e
    with f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetError(f"no records in {path}", path=path)

    def fail(lineno, msg):
        raise DatasetError(f"{path}, line {lineno}: {msg}", path=path)

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}, line 1: invalid header ({e.msg})", path=path) from e
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        fail(1, "not an episode file (bad schema)")
    if header.get("version") != SCHEMA_VERSION:
        fail(1, f"unsupported version {header.get('version')!r}")

    metas: dict[int, dict] = {}
    rows: dict[int, list] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ep_i = int(rec["ep"])
            if "meta" in rec:
                metas[ep_i] = rec["meta"]
                continue
            row = (
                int(rec["t"]),
                np.asarray(rec["keypoints"], dtype=float),
                np.asarray(rec["obj_pose"], dtype=float),
                np.asarray(rec["action"], dtype=float),
                np.asarray(rec["proprio"], dtype=float),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
            fail(lineno, f"malformed record ({e})")
        rows.setdefault(ep_i, []).append(row)

    if not rows:
        raise DatasetError(f"no step records in {path}", path=path)
    episodes = []
    for ep_i in sorted(rows):
        steps = sorted(rows[ep_i], key=lambda r: r[0])
        episodes.append(
            Episode(
                keypoints=np.stack([r[1] for r in steps]),
                obj_poses=np.stack([r[2] for r in steps]),
                actions=np.stack([r[3] for r in steps]),
                proprios=np.stack([r[4] for r in steps]),
                meta=metas.get(ep_i, {}),
            )
        )
    return episodes, header
