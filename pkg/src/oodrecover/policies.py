"""Nearest-neighbor behavior-cloning policies.

Both policies index length-L training windows behind small sklearn-style
estimators: the base policy retrieves action windows from (keypoints,
proprioception) features, the inverse policy from zeroed keypoint
trajectories. Retrieval is brute force with a stable sort, so ties break by
insertion order and results are bit-reproducible.
"""

from __future__ import annotations

import json
import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Episode, Sequence, zero_out
from .geom import Pose2, pose_from_keypoints, wrap_angle


def _standardize_fit(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    return mean, scale


def _block_weights(n_feature_dims: int, n_proprio_dims: int, proprio_weight) -> np.ndarray:
    """Per-dimension weights applied after standardization.

    ``proprio_weight=None`` balances the two feature blocks so that the
    proprioception contributes as much squared distance as the keypoints.
    """
    if proprio_weight is None:
        proprio_weight = math.sqrt((n_feature_dims - n_proprio_dims) / n_proprio_dims)
    w = np.ones(n_feature_dims)
    w[-n_proprio_dims:] = float(proprio_weight)
    return w


class _KnnWindowIndex:
    """Brute-force k-NN over standardized feature rows -> action windows."""

    def __init__(self, feats: np.ndarray, targets: np.ndarray, k: int, proprio_dims: int, proprio_weight):
        if feats.shape[0] == 0:
            raise ValueError("empty training index")
        if k < 1 or k > feats.shape[0]:
            raise ValueError(f"k must be in [1, {feats.shape[0]}]")
        self.k = k
        self.mean, self.scale = _standardize_fit(feats)
        self.weights = _block_weights(feats.shape[1], proprio_dims, proprio_weight)
        self.x = (feats - self.mean) / self.scale * self.weights
        self.targets = targets

    def query(self, feat: np.ndarray) -> np.ndarray:
        q = (feat - self.mean) / self.scale * self.weights
        d2 = ((self.x - q) ** 2).sum(axis=1)
        if self.k == 1:
            return self.targets[int(np.argmin(d2))].copy()
        order = np.argsort(d2, kind="stable")[: self.k]
        return self.targets[order].mean(axis=0)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "weights": self.weights.tolist(),
            "x": self.x.tolist(),
            "targets": self.targets.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "_KnnWindowIndex":
        idx = cls.__new__(cls)
        idx.k = d["k"]
        idx.mean = np.asarray(d["mean"], dtype=float)
        idx.scale = np.asarray(d["scale"], dtype=float)
        idx.weights = np.asarray(d["weights"], dtype=float)
        idx.x = np.asarray(d["x"], dtype=float)
        idx.targets = np.asarray(d["targets"], dtype=float)
        return idx


class KnnBasePolicy(BaseEstimator):
    """Task policy: nearest training window by (keypoints, proprio) features.

    ``act`` returns the action window of the nearest neighbor (k=1) or the
    elementwise mean over k neighbors. Memorization is exact: querying a
    training window start reproduces its stored actions bit for bit.

    By default the retrieved window is locally re-anchored: when the observed
    object pose is within ``align_radius`` / ``align_max_rot`` of the matched
    window's recorded pose, the action window is rigidly transformed by the
    pose difference so pushes land on the object despite small retrieval
    mismatch. Beyond the gate the stored actions are replayed verbatim, so the
    policy keeps its absolute-position behavior (and its failure) on states
    far from the data. Set ``align_radius=0`` for pure verbatim replay.
    """

    def __init__(
        self,
        k: int = 1,
        horizon: int = 16,
        proprio_weight: float | None = None,
        align_radius: float = 80.0,
        align_max_rot: float = 0.9,
    ):
        self.k = k
        self.horizon = horizon
        self.proprio_weight = proprio_weight
        self.align_radius = align_radius
        self.align_max_rot = align_max_rot

    def fit(self, episodes: list[Episode]):
        if not episodes:
            raise ValueError("no demonstrations given")
        feats, targets, poses = [], [], []
        skipped = 0
        n_kp = episodes[0].n_keypoints
        template = None
        for ep in episodes:
            if ep.n_keypoints != n_kp:
                raise ValueError("episodes disagree on keypoint count")
            t_len = len(ep)
            if t_len < self.horizon:
                skipped += 1
                continue
            if template is None:
                template = ep.pose_at(0).inverse().transform(ep.keypoints[0])
            for j in range(t_len - self.horizon + 1):
                feats.append(np.concatenate([ep.keypoints[j].ravel(), ep.proprios[j]]))
                targets.append(ep.actions[j : j + self.horizon])
                poses.append(ep.obj_poses[j])
        if not feats:
            raise ValueError("all episodes shorter than the policy horizon")
        self.n_keypoints_ = n_kp
        self.n_skipped_ = skipped
        self.template_ = template
        self.window_poses_ = np.stack(poses)
        self.index_ = _KnnWindowIndex(
            np.stack(feats), np.stack(targets), self.k, 2, self.proprio_weight
        )
        return self

    def _aligned_window(self, row: int, obs_pose: Pose2) -> np.ndarray:
        """Window ``row`` re-anchored to the observed pose, if within the gate."""
        targets = self.index_.targets[row]
        demo = Pose2.from_array(self.window_poses_[row])
        dth = wrap_angle(obs_pose.theta - demo.theta)
        dx = obs_pose.x - demo.x
        dy = obs_pose.y - demo.y
        dist = math.hypot(dx, dy)
        if dist < 1e-9 and abs(dth) < 1e-12:
            return targets.copy()  # exact match: bit-exact memorization
        if dist > self.align_radius or abs(dth) > self.align_max_rot:
            return targets.copy()  # novel state: verbatim replay
        # rotate about the recorded object position, then translate
        c, s = math.cos(dth), math.sin(dth)
        g = Pose2(
            demo.x + dx - (c * demo.x - s * demo.y),
            demo.y + dy - (s * demo.x + c * demo.y),
            dth,
        )
        return g.transform(targets)

    def act(self, keypoints, proprio) -> np.ndarray:
        """Action window (horizon, 2) for the current observation."""
        if not hasattr(self, "index_"):
            raise NotFittedError("KnnBasePolicy is not fitted")
        kps = np.asarray(keypoints, dtype=float)
        feat = np.concatenate([kps.ravel(), np.asarray(proprio, dtype=float)])
        idx = self.index_
        q = (feat - idx.mean) / idx.scale * idx.weights
        d2 = ((idx.x - q) ** 2).sum(axis=1)
        if self.k == 1:
            rows = [int(np.argmin(d2))]
        else:
            rows = [int(r) for r in np.argsort(d2, kind="stable")[: self.k]]
        if self.align_radius <= 0:
            picked = [idx.targets[r].copy() for r in rows]
        else:
            obs_pose = pose_from_keypoints(self.template_, kps)
            picked = [self._aligned_window(r, obs_pose) for r in rows]
        if len(picked) == 1:
            return picked[0]
        return np.mean(picked, axis=0)

    SCHEMA = "knn-base-policy"
    SCHEMA_VERSION = 1

    def save(self, path) -> None:
        if not hasattr(self, "index_"):
            raise NotFittedError("KnnBasePolicy is not fitted")
        doc = {
            "schema": self.SCHEMA,
            "version": self.SCHEMA_VERSION,
            "params": self.get_params(),
            "n_keypoints": self.n_keypoints_,
            "n_skipped": self.n_skipped_,
            "template": self.template_.tolist(),
            "window_poses": self.window_poses_.tolist(),
            "index": self.index_.to_dict(),
        }
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "KnnBasePolicy":
        with open(path, "r") as f:
            doc = json.load(f)
        if doc.get("schema") != cls.SCHEMA or doc.get("version") != cls.SCHEMA_VERSION:
            raise ValueError(f"{path}: not a base-policy file")
        model = cls(**doc["params"])
        model.n_keypoints_ = doc["n_keypoints"]
        model.n_skipped_ = doc["n_skipped"]
        model.template_ = np.asarray(doc["template"], dtype=float)
        model.window_poses_ = np.asarray(doc["window_poses"], dtype=float)
        model.index_ = _KnnWindowIndex.from_dict(doc["index"])
        return model


class KnnInversePolicy(BaseEstimator):
    """Keypoint inverse policy: desired keypoint trajectory -> action window.

    With ``zero_out`` enabled (the default) training windows and queries are
    expressed in the frame of their initial object pose, so the policy sees
    only trajectories starting at the keypoint template regardless of where
    the object actually is. ``zero_out=False`` keeps raw world-frame windows
    (the ablation that fails under distribution shift).
    """

    def __init__(
        self,
        k: int = 1,
        horizon: int = 16,
        proprio_weight: float | None = None,
        zero_out: bool = True,
    ):
        self.k = k
        self.horizon = horizon
        self.proprio_weight = proprio_weight
        self.zero_out = zero_out

    def fit(self, sequences: list[Sequence]):
        if not sequences:
            raise ValueError("no training sequences given")
        n_kp = sequences[0].keypoints.shape[1]
        feats, targets = [], []
        for seq in sequences:
            if seq.keypoints.shape != (self.horizon, n_kp, 2):
                raise ValueError(
                    f"sequence shape {seq.keypoints.shape} does not match "
                    f"(horizon={self.horizon}, n={n_kp}, 2)"
                )
            if self.zero_out:
                z = zero_out(seq)
                kps, actions, proprio = z.keypoints, z.actions, z.proprio0
            else:
                kps, actions, proprio = seq.keypoints, seq.actions, seq.proprio0
            feats.append(np.concatenate([kps.ravel(), proprio]))
            targets.append(actions)
        self.n_keypoints_ = n_kp
        self.index_ = _KnnWindowIndex(
            np.stack(feats), np.stack(targets), self.k, 2, self.proprio_weight
        )
        return self

    def predict(self, kp_traj, proprio) -> np.ndarray:
        """Action window for a keypoint trajectory in the policy's own frame."""
        if not hasattr(self, "index_"):
            raise NotFittedError("KnnInversePolicy is not fitted")
        traj = np.asarray(kp_traj, dtype=float)
        if traj.shape != (self.horizon, self.n_keypoints_, 2):
            raise ValueError(f"bad trajectory shape {traj.shape}")
        feat = np.concatenate([traj.ravel(), np.asarray(proprio, dtype=float)])
        return self.index_.query(feat)

    def act_world(self, plan, obj_pose: Pose2, proprio) -> np.ndarray:
        """World-frame actions for a world-frame keypoint plan.

        The plan and proprioception are mapped into the current object frame,
        the policy is queried there, and its actions are mapped back out, so
        the answer only depends on the plan relative to the object.
        """
        if self.zero_out:
            inv = obj_pose.inverse()
            local = self.predict(inv.transform(plan), inv.transform(proprio))
            return obj_pose.transform(local)
        return self.predict(plan, proprio)

    SCHEMA = "knn-inverse-policy"
    SCHEMA_VERSION = 1

    def save(self, path) -> None:
        if not hasattr(self, "index_"):
            raise NotFittedError("KnnInversePolicy is not fitted")
        doc = {
            "schema": self.SCHEMA,
            "version": self.SCHEMA_VERSION,
            "params": self.get_params(),
            "n_keypoints": self.n_keypoints_,
            "index": self.index_.to_dict(),
        }
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "KnnInversePolicy":
        with open(path, "r") as f:
            doc = json.load(f)
        if doc.get("schema") != cls.SCHEMA or doc.get("version") != cls.SCHEMA_VERSION:
            raise ValueError(f"{path}: not an inverse-policy file")
        model = cls(**doc["params"])
        model.n_keypoints_ = doc["n_keypoints"]
        model.index_ = _KnnWindowIndex.from_dict(doc["index"])
        return model


def train_base(demos: list[Episode], k: int = 1, horizon: int = 16,
               proprio_weight: float | None = None, align_radius: float = 80.0,
               align_max_rot: float = 0.9) -> KnnBasePolicy:
    return KnnBasePolicy(
        k=k, horizon=horizon, proprio_weight=proprio_weight,
        align_radius=align_radius, align_max_rot=align_max_rot,
    ).fit(demos)


def train_inverse(sequences: list[Sequence], k: int = 1, horizon: int = 16,
                  proprio_weight: float | None = None, zero: bool = True) -> KnnInversePolicy:
    return KnnInversePolicy(
        k=k, horizon=horizon, proprio_weight=proprio_weight, zero_out=zero
    ).fit(sequences)


def inverse_act(policy: KnnInversePolicy, plan, obj_pose: Pose2, proprio) -> np.ndarray:
    return policy.act_world(plan, obj_pose, proprio)
