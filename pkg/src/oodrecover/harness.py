"""Batch evaluation, demonstration collection, and continual-learning
augmentation."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Episode
from .geom import Pose2
from .joint import (
    RECOVER,
    SUCCESS,
    JointPolicy,
    RolloutTrace,
    joint_step,
    rollout,
    rollout_base,
)
from .policies import KnnBasePolicy
from .sim import ID, SimConfig, is_success, observe, reset, scripted_expert, step


def fingerprint(*parts) -> str:
    """Stable hex digest over canonical JSON renderings of the inputs."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(part)
        else:
            h.update(json.dumps(part, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# scripted-expert demonstrations


def run_expert_episode(cfg: SimConfig, template, seed: int, region: str = ID,
                       max_steps: int | None = None) -> Episode:
    """Roll the scripted expert from a seeded reset and record every step."""
    limit = cfg.max_steps if max_steps is None else max_steps
    s = reset(cfg, seed, region)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 1]))
    kps_rows, pose_rows, act_rows, prop_rows = [], [], [], []
    success = is_success(s, cfg)
    while not success and s.step_count < limit:
        kps, proprio = observe(s, template)
        action = scripted_expert(s, cfg, rng)
        kps_rows.append(kps)
        pose_rows.append(s.block_pose.to_array())
        act_rows.append(action)
        prop_rows.append(proprio)
        s = step(s, action, cfg)
        success = is_success(s, cfg)
    if not kps_rows:  # success at reset: record a single hold step
        kps, proprio = observe(s, template)
        kps_rows.append(kps)
        pose_rows.append(s.block_pose.to_array())
        act_rows.append(np.array(s.ee_pos))
        prop_rows.append(proprio)
    return Episode(
        keypoints=np.stack(kps_rows),
        obj_poses=np.stack(pose_rows),
        actions=np.stack(act_rows),
        proprios=np.stack(prop_rows),
        meta={
            "seed": seed,
            "region": region,
            "success": bool(success),
            "steps": s.step_count,
            "final_pose": s.block_pose.to_array().tolist(),
        },
    )


def collect_demos(cfg: SimConfig, template, n_episodes: int, seed_start: int = 0,
                  region: str = ID, require_success: bool = True,
                  max_attempts: int | None = None) -> tuple[list[Episode], dict]:
    """Collect scripted-expert demonstrations.

    Seeds run sequentially from ``seed_start``; failed episodes are skipped
    (and counted) when ``require_success`` is set, drawing further seeds until
    the requested count is reached.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    attempts_cap = max_attempts if max_attempts is not None else 4 * n_episodes
    demos: list[Episode] = []
    failures = 0
    seed = seed_start
    attempts = 0
    while len(demos) < n_episodes:
        if attempts >= attempts_cap:
            raise RuntimeError(
                f"scripted expert produced only {len(demos)}/{n_episodes} successful "
                f"episodes in {attempts} attempts"
            )
        ep = run_expert_episode(cfg, template, seed, region)
        attempts += 1
        seed += 1
        if ep.meta["success"] or not require_success:
            demos.append(ep)
        else:
            failures += 1
    stats = {"attempts": attempts, "failures": failures,
             "success_rate": (attempts - failures) / attempts}
    return demos, stats


# ---------------------------------------------------------------------------
# evaluation suite


@dataclass
class EvalReport:
    policy_id: str
    region: str
    seeds: list[int]
    successes: list[bool]
    steps: list[int]
    success_rate: float
    mean_steps_to_success: float | None
    fingerprint: str
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "region": self.region,
            "seeds": self.seeds,
            "successes": self.successes,
            "steps": self.steps,
            "success_rate": self.success_rate,
            "mean_steps_to_success": self.mean_steps_to_success,
            "fingerprint": self.fingerprint,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def csv_rows(self) -> list[str]:
        rows = ["policy_id,region,seed,success,steps"]
        for seed, ok, n in zip(self.seeds, self.successes, self.steps):
            rows.append(f"{self.policy_id},{self.region},{seed},{int(ok)},{n}")
        return rows

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        d = json.loads(text)
        return EvalReport(**d)


def _one_eval_rollout(args) -> RolloutTrace:
    cfg, policy_kind, models, seed, region, exec_per_cycle, max_steps = args
    if policy_kind == "joint":
        return rollout(cfg, models, seed, region, max_steps)
    base, template = models
    return rollout_base(cfg, base, template, seed, region, exec_per_cycle, max_steps)


def eval_suite(
    cfg: SimConfig,
    policy_kind: str,
    models,
    region: str,
    seeds: list[int],
    policy_id: str | None = None,
    exec_per_cycle: int = 8,
    max_steps: int | None = None,
    jobs: int = 1,
    config_dict: dict | None = None,
    extra_fingerprint=None,
) -> EvalReport:
    """One rollout per seed, aggregated deterministically in seed order.

    ``policy_kind`` is "joint" (models = JointPolicy) or "base"
    (models = (KnnBasePolicy, template)).
    """
    if not seeds:
        raise ValueError("empty seed list")
    if policy_kind not in ("joint", "base"):
        raise ValueError(f"unknown policy kind {policy_kind!r}")
    tasks = [(cfg, policy_kind, models, int(s), region, exec_per_cycle, max_steps)
             for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(_one_eval_rollout, tasks))
    else:
        traces = [_one_eval_rollout(t) for t in tasks]

    successes = [t.success for t in traces]
    steps = [t.n_steps for t in traces]
    n_succ = sum(successes)
    mean_steps = (
        float(np.mean([n for n, ok in zip(steps, successes) if ok])) if n_succ else None
    )
    cfg_dict = config_dict if config_dict is not None else {}
    fp = fingerprint(
        {"policy_id": policy_id or policy_kind, "region": region, "seeds": list(seeds)},
        cfg_dict,
        extra_fingerprint or "",
    )
    return EvalReport(
        policy_id=policy_id or policy_kind,
        region=region,
        seeds=[int(s) for s in seeds],
        successes=successes,
        steps=steps,
        success_rate=n_succ / len(seeds),
        mean_steps_to_success=mean_steps,
        fingerprint=fp,
        config=cfg_dict,
    )


# ---------------------------------------------------------------------------
# continual-learning augmentation


@dataclass
class AugmentedDataset:
    episodes: list[Episode]
    provenance: dict


def _record_recovery_episode(cfg: SimConfig, jp: JointPolicy, seed: int,
                             max_steps: int | None = None) -> Episode | None:
    """Roll the recovery pipeline from an OOD reset, recording every step
    until the mean keypoint density reaches the ID threshold.

    Returns ``None`` on timeout. The recorded schema matches base
    demonstrations, so the episodes feed straight back into base training.
    """
    limit = cfg.max_steps if max_steps is None else max_steps
    s = reset(cfg, seed, "OOD")
    threshold = jp.manifold.density_threshold_
    kps_rows, pose_rows, act_rows, prop_rows = [], [], [], []
    reached = False
    step_i = 0
    prev_branch = None
    while step_i < limit:
        kps, proprio = observe(s, jp.template)
        if jp.manifold.frame_density(kps) >= threshold:
            reached = True
            break
        actions, branch, _ = joint_step(jp, s.block_pose, kps, proprio, prev_branch)
        prev_branch = branch
        stop = False
        for a in actions[: jp.exec_per_cycle]:
            kps, proprio = observe(s, jp.template)
            kps_rows.append(kps)
            pose_rows.append(s.block_pose.to_array())
            act_rows.append(np.array(a, dtype=float))
            prop_rows.append(proprio)
            s = step(s, a, cfg)
            step_i += 1
            new_kps, _ = observe(s, jp.template)
            if jp.manifold.frame_density(new_kps) >= threshold:
                reached = True
                stop = True
                break
            if step_i >= limit:
                break
        if stop:
            break
    if not reached or not kps_rows:
        return None
    return Episode(
        keypoints=np.stack(kps_rows),
        obj_poses=np.stack(pose_rows),
        actions=np.stack(act_rows),
        proprios=np.stack(prop_rows),
        meta={
            "seed": seed,
            "region": "OOD",
            "kind": "recovery",
            "steps": step_i,
            "final_pose": s.block_pose.to_array().tolist(),
            "final_ee": np.asarray(s.ee_pos).tolist(),
            "final_density": jp.manifold.frame_density(observe(s, jp.template)[0]),
        },
    )


def collect_aug_demos(cfg: SimConfig, jp: JointPolicy, n_inits: int,
                      seed_start: int = 1000,
                      max_steps: int | None = None) -> AugmentedDataset:
    """Autonomously collect recovery demonstrations from OOD initializations.

    One attempt per init; timed-out rollouts are excluded and counted in the
    provenance rather than silently dropped.
    """
    if n_inits < 1:
        raise ValueError("n_inits must be at least 1")
    episodes = []
    seeds_used = []
    n_timeout = 0
    for i in range(n_inits):
        seed = seed_start + i
        ep = _record_recovery_episode(cfg, jp, seed, max_steps)
        if ep is None:
            n_timeout += 1
            continue
        episodes.append(ep)
        seeds_used.append(seed)
    return AugmentedDataset(
        episodes=episodes,
        provenance={
            "n_inits": n_inits,
            "seed_start": seed_start,
            "seeds_recorded": seeds_used,
            "n_timeout": n_timeout,
            "stop_criterion": "frame density >= threshold",
            "density_threshold": jp.manifold.density_threshold_,
        },
    )


def retrain_augmented(base_demos: list[Episode], aug: AugmentedDataset,
                      k: int = 1, horizon: int = 16,
                      proprio_weight: float | None = None,
                      align_radius: float = 80.0,
                      align_max_rot: float = 0.9) -> KnnBasePolicy:
    """Re-index the base policy over the union of original and recovery demos."""
    if not base_demos:
        raise ValueError("no base demonstrations given")
    if aug.episodes:
        n = base_demos[0].n_keypoints
        for ep in aug.episodes:
            if ep.n_keypoints != n:
                raise ValueError("augmented episodes disagree with base schema")
    return KnnBasePolicy(
        k=k, horizon=horizon, proprio_weight=proprio_weight,
        align_radius=align_radius, align_max_rot=align_max_rot,
    ).fit(base_demos + aug.episodes)


# ---------------------------------------------------------------------------
# kinematic-ascent probe


def verify_kinematic_ascent(
    cfg: SimConfig,
    manifold,
    plan_cfg,
    template,
    n_starts: int = 50,
    max_cycles: int = 500,
    seed_start: int = 5000,
    tol: float = 1e-12,
) -> dict:
    """Teleport keypoints along re-planned recovery trajectories.

    From each OOD reset the keypoints jump to frame 1 of a fresh zero-delay
    plan every cycle; reports whether the mean density rose monotonically
    (within ``tol``) and reached the threshold for every start.
    """
    from .planner import naive_plan

    threshold = manifold.density_threshold_
    results = {"n_starts": n_starts, "alpha": plan_cfg.alpha, "failures": [],
               "max_cycles_used": 0, "all_reached": True, "monotone": True}
    for i in range(n_starts):
        s = reset(cfg, seed_start + i, "OOD")
        kps = s.block_pose.transform(template)
        density = manifold.frame_density(kps)
        reached = density >= threshold
        cycles = 0
        while not reached and cycles < max_cycles:
            rt = manifold.recovery_tuple(kps)
            plan = naive_plan(kps, rt.delta, plan_cfg)
            kps = plan[0]
            new_density = manifold.frame_density(kps)
            if new_density < density - tol:
                results["monotone"] = False
                results["failures"].append(
                    {"seed": seed_start + i, "cycle": cycles,
                     "drop": density - new_density}
                )
            density = new_density
            cycles += 1
            reached = density >= threshold
        results["max_cycles_used"] = max(results["max_cycles_used"], cycles)
        if not reached:
            results["all_reached"] = False
            results["failures"].append({"seed": seed_start + i, "cycle": cycles,
                                        "unreached_density": density})
    return results
