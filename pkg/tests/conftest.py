import numpy as np
import pytest

from oodrecover import (
    EmConfig,
    JointPolicy,
    KeypointManifold,
    KnnBasePolicy,
    KnnInversePolicy,
    PlanConfig,
    SimConfig,
    build_recovery_dataset,
    default_keypoint_template,
    extract_sequences,
)
from oodrecover.harness import collect_demos


@pytest.fixture(scope="session")
def cfg():
    return SimConfig()


@pytest.fixture(scope="session")
def template(cfg):
    return default_keypoint_template(cfg.t_block)


def random_pose(rng):
    from oodrecover import Pose2

    return Pose2(
        rng.uniform(-200, 200), rng.uniform(-200, 200), rng.uniform(-np.pi, np.pi)
    )


@pytest.fixture(scope="session")
def tiny_pipeline(cfg, template):
    """Small but real pipeline shared by integration-style tests.

    12 expert demos, 2-component mixtures, horizon 8: a few seconds to build.
    """
    demos, _ = collect_demos(cfg, template, 12, seed_start=0)
    rec = build_recovery_dataset(demos, template)
    frames = np.concatenate([ep.keypoints for ep in rec])
    manifold = KeypointManifold(n_components=2, n_init=2, max_iter=80, seed=0).fit(frames)
    manifold.calibrate(frames)
    plan_cfg = PlanConfig(horizon=8)
    seqs, _ = extract_sequences(rec, plan_cfg.horizon)
    base = KnnBasePolicy(k=1, horizon=plan_cfg.horizon).fit(demos)
    inverse = KnnInversePolicy(k=1, horizon=plan_cfg.horizon).fit(seqs)
    joint = JointPolicy(
        base=base,
        inverse=inverse,
        manifold=manifold,
        plan_cfg=plan_cfg,
        template=template,
        exec_per_cycle=8,
    )
    return {
        "demos": demos,
        "rec": rec,
        "frames": frames,
        "manifold": manifold,
        "sequences": seqs,
        "base": base,
        "inverse": inverse,
        "joint": joint,
        "plan_cfg": plan_cfg,
    }
