"""Keypoint-density OOD detection and gradient-based object recovery for a
planar push task: simulator, datasets, manifold, planner, policies, and the
density-switched joint policy."""

from .geom import Pose2, as_keypoints, compose, inverse, transform_keypoints, wrap_angle
from .sim import (
    ANY,
    ID,
    OOD,
    ExpertConfig,
    SimConfig,
    SimState,
    TBlockSpec,
    coverage,
    default_keypoint_template,
    region_of,
    reset,
    scripted_expert,
    step,
)
from .data import (
    Episode,
    Sequence,
    ZeroedSequence,
    build_recovery_dataset,
    extract_sequences,
    load_episodes,
    restore,
    save_episodes,
    zero_out,
)
from .manifold import (
    EmConfig,
    GaussianMixture2,
    KeypointManifold,
    RecoveryTuple,
    fit_em,
    fit_em_bic,
)
from .planner import PlanConfig, delay, naive_plan, plan_recovery
from .policies import (
    KnnBasePolicy,
    KnnInversePolicy,
    inverse_act,
    train_base,
    train_inverse,
)
from .joint import (
    BASE,
    RECOVER,
    JointPolicy,
    RolloutTrace,
    joint_step,
    rollout,
    rollout_base,
    verify_trace,
)
from .harness import (
    AugmentedDataset,
    EvalReport,
    collect_aug_demos,
    collect_demos,
    eval_suite,
    retrain_augmented,
    verify_kinematic_ascent,
)
from .config import RunConfig, load_config

__version__ = "0.1.0"
