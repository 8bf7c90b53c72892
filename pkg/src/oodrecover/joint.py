"""Density-activated switching between the base policy and the recovery
pipeline, plus the closed-loop rollout executor and trace recording."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose2
from .manifold import KeypointManifold
from .planner import PlanConfig, plan_recovery
from .policies import KnnBasePolicy, KnnInversePolicy
from .sim import SimConfig, SimState, is_success, observe, reset, step

BASE = "BASE"
RECOVER = "RECOVER"

SUCCESS = "SUCCESS"
TIMEOUT = "TIMEOUT"


@dataclass
class JointPolicy:
    base: KnnBasePolicy
    inverse: KnnInversePolicy
    manifold: KeypointManifold
    plan_cfg: PlanConfig
    template: np.ndarray
    exec_per_cycle: int = 16  # full-window execution; delayed plans need the tail
    hysteresis: float = 0.0   # >0 raises the exit threshold while recovering

    def __post_init__(self):
        if not (1 <= self.exec_per_cycle <= self.plan_cfg.horizon):
            raise ValueError("exec_per_cycle must be in [1, horizon]")
        if self.hysteresis < 0:
            raise ValueError("hysteresis must be non-negative")


def joint_step(
    jp: JointPolicy,
    obj_pose: Pose2,
    keypoints,
    proprio,
    prev_branch: str | None = None,
) -> tuple[np.ndarray, str, float]:
    """One switching decision: returns (action window, branch, mean density).

    The base branch is taken when the mean keypoint density is at or above
    the threshold (boundary inclusive); otherwise a recovery trajectory is
    planned from the shaped gradient and translated by the inverse policy.
    """
    rt = jp.manifold.recovery_tuple(keypoints)
    threshold = jp.manifold.density_threshold_
    if jp.hysteresis > 0 and prev_branch == RECOVER:
        threshold = threshold * (1.0 + jp.hysteresis)
    if rt.density >= threshold:
        return jp.base.act(keypoints, proprio), BASE, rt.density
    proprio = np.asarray(proprio, dtype=float)
    d_pos = float(np.linalg.norm(proprio - obj_pose.position))
    plan = plan_recovery(keypoints, rt.delta, d_pos, jp.plan_cfg)
    return jp.inverse.act_world(plan, obj_pose, proprio), RECOVER, rt.density


@dataclass
class TraceStep:
    step: int
    cycle: int
    block_pose: Pose2        # state before the action
    ee_pos: np.ndarray
    branch: str
    density: float | None    # decision-point density; None for pure-base runs
    action: np.ndarray


@dataclass
class RolloutTrace:
    steps: list[TraceStep]
    status: str
    seed: int
    region: str
    n_steps: int
    final_pose: Pose2
    final_ee: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.status == SUCCESS


def _run_rollout(cfg: SimConfig, act_fn, exec_per_cycle: int, seed: int,
                 region: str, max_steps: int | None) -> RolloutTrace:
    """Shared executor: observe, decide, run a prefix of the action window."""
    limit = cfg.max_steps if max_steps is None else max_steps
    s = reset(cfg, seed, region)
    steps: list[TraceStep] = []
    status = SUCCESS if is_success(s, cfg) else TIMEOUT
    step_i = 0
    cycle = 0
    prev_branch: str | None = None
    while status != SUCCESS and step_i < limit:
        actions, branch, density = act_fn(s, prev_branch)
        prev_branch = branch
        for a in actions[:exec_per_cycle]:
            steps.append(
                TraceStep(
                    step=step_i,
                    cycle=cycle,
                    block_pose=s.block_pose,
                    ee_pos=np.array(s.ee_pos),
                    branch=branch,
                    density=density,
                    action=np.array(a, dtype=float),
                )
            )
            s = step(s, a, cfg)
            step_i += 1
            if is_success(s, cfg):
                status = SUCCESS
                break
            if step_i >= limit:
                break
        cycle += 1
    return RolloutTrace(
        steps=steps,
        status=status,
        seed=seed,
        region=region,
        n_steps=step_i,
        final_pose=s.block_pose,
        final_ee=np.array(s.ee_pos),
    )


def rollout(cfg: SimConfig, jp: JointPolicy, seed: int, region: str,
            max_steps: int | None = None) -> RolloutTrace:
    """Closed-loop joint-policy episode from a seeded reset."""

    def act(s: SimState, prev_branch):
        kps, proprio = observe(s, jp.template)
        return joint_step(jp, s.block_pose, kps, proprio, prev_branch)

    return _run_rollout(cfg, act, jp.exec_per_cycle, seed, region, max_steps)


def rollout_base(cfg: SimConfig, base: KnnBasePolicy, template, seed: int,
                 region: str, exec_per_cycle: int = 8,
                 max_steps: int | None = None) -> RolloutTrace:
    """Closed-loop episode under the base policy alone."""

    def act(s: SimState, prev_branch):
        kps, proprio = observe(s, template)
        return base.act(kps, proprio), BASE, None

    return _run_rollout(cfg, act, exec_per_cycle, seed, region, max_steps)


def verify_trace(trace: RolloutTrace, jp: JointPolicy) -> list[str]:
    """Replay every decision point of a joint-policy trace.

    Checks that each cycle's branch matches the density threshold comparison
    and that the recorded actions equal the chosen sub-policy's output
    bit-exactly. Returns a list of mismatch descriptions (empty means clean).
    """
    problems: list[str] = []
    by_cycle: dict[int, list[TraceStep]] = {}
    for ts in trace.steps:
        by_cycle.setdefault(ts.cycle, []).append(ts)
    prev_branch: str | None = None
    for cycle in sorted(by_cycle):
        recs = sorted(by_cycle[cycle], key=lambda r: r.step)
        first = recs[0]
        kps = first.block_pose.transform(jp.template)
        actions, branch, density = joint_step(
            jp, first.block_pose, kps, first.ee_pos, prev_branch
        )
        prev_branch = branch
        threshold = jp.manifold.density_threshold_
        expect_base = density >= threshold if jp.hysteresis == 0 else branch == BASE
        if (branch == BASE) != expect_base:
            problems.append(f"cycle {cycle}: branch does not match the comparison")
        for ts in recs:
            if ts.branch != branch:
                problems.append(f"step {ts.step}: recorded branch {ts.branch} != {branch}")
            if ts.density is not None and ts.density != density:
                problems.append(f"step {ts.step}: recorded density differs")
        for ts, a in zip(recs, actions):
            if not np.array_equal(ts.action, a):
                problems.append(f"step {ts.step}: action differs from {branch} output")
    return problems


# ---------------------------------------------------------------------------
# trace persistence

TRACE_SCHEMA = "push-trace"
TRACE_VERSION = 1


def save_trace(path, trace: RolloutTrace) -> None:
    header = {
        "schema": TRACE_SCHEMA,
        "version": TRACE_VERSION,
        "seed": trace.seed,
        "region": trace.region,
        "status": trace.status,
        "n_steps": trace.n_steps,
        "final_pose": trace.final_pose.to_array().tolist(),
        "final_ee": trace.final_ee.tolist(),
        "meta": trace.meta,
    }
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for ts in trace.steps:
            rec = {
                "step": ts.step,
                "cycle": ts.cycle,
                "block_pose": ts.block_pose.to_array().tolist(),
                "ee": ts.ee_pos.tolist(),
                "branch": ts.branch,
                "density": ts.density,
                "action": ts.action.tolist(),
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trace(path) -> RolloutTrace:
    with open(path, "r") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"no records in {path}")
    header = json.loads(lines[0])
    if header.get("schema") != TRACE_SCHEMA or header.get("version") != TRACE_VERSION:
        raise ValueError(f"{path}: not a trace file")
    steps = []
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        steps.append(
            TraceStep(
                step=rec["step"],
                cycle=rec["cycle"],
                block_pose=Pose2.from_array(rec["block_pose"]),
                ee_pos=np.asarray(rec["ee"], dtype=float),
                branch=rec["branch"],
                density=rec["density"],
                action=np.asarray(rec["action"], dtype=float),
            )
        )
    return RolloutTrace(
        steps=steps,
        status=header["status"],
        seed=header["seed"],
        region=header["region"],
        n_steps=header["n_steps"],
        final_pose=Pose2.from_array(header["final_pose"]),
        final_ee=np.asarray(header["final_ee"], dtype=float),
        meta=header.get("meta", {}),
    )
