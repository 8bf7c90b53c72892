"""Command-line pipeline: demos -> recovery dataset -> models -> evaluation.

Every subcommand is a pure function of its config fingerprint, input files,
and seeds; re-running a command reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, canonical_dict, load_config
from .data import (
    DatasetError,
    build_recovery_dataset,
    extract_sequences,
    load_episodes,
    save_episodes,
)
from .harness import (
    collect_aug_demos,
    collect_demos,
    eval_suite,
    fingerprint,
    retrain_augmented,
)
from .joint import JointPolicy, rollout, rollout_base, save_trace, load_trace
from .manifold import KeypointManifold
from .planner import PlanConfig
from .policies import KnnBasePolicy, KnnInversePolicy
from .sim import default_keypoint_template
from . import svgplot

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def parse_seeds(text: str) -> list[int]:
    """Seed lists: "7", "0,3,9", or an inclusive range "0..29"."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo_i, hi_i = int(lo), int(hi)
        if hi_i < lo_i:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo_i, hi_i + 1))
    return [int(part) for part in text.split(",") if part.strip()]


# ---------------------------------------------------------------------------
# config plumbing

_FLAG_PATHS = {
    "seed": ("sim", "seed"),
    "success_coverage": ("sim", "success_coverage"),
    "mixture_size": ("manifold", "n_components"),
    "mag_ref": ("manifold", "mag_ref"),
    "mag_scale": ("manifold", "mag_scale"),
    "density_threshold": ("manifold", "density_threshold"),
    "alpha": ("plan", "alpha"),
    "horizon": ("plan", "horizon"),
    "d_min": ("plan", "d_min"),
    "d_max": ("plan", "d_max"),
    "k": ("policy", "k"),
    "proprio_weight": ("policy", "proprio_weight"),
    "zero_out": ("policy", "zero_out"),
    "align_radius": ("policy", "align_radius"),
    "align_max_rot": ("policy", "align_max_rot"),
    "exec_per_cycle": ("joint", "exec_per_cycle"),
    "hysteresis": ("joint", "hysteresis"),
    "max_steps": ("eval", "max_steps"),
    "base_exec_per_cycle": ("eval", "base_exec_per_cycle"),
    "jobs": ("eval", "jobs"),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    g = p.add_argument_group("config overrides")
    g.add_argument("--seed", type=int)
    g.add_argument("--success-coverage", type=float, dest="success_coverage")
    g.add_argument("--mixture-size", type=int, dest="mixture_size")
    g.add_argument("--mag-ref", type=float, dest="mag_ref")
    g.add_argument("--mag-scale", type=float, dest="mag_scale")
    g.add_argument("--density-threshold", type=float, dest="density_threshold")
    g.add_argument("--alpha", type=float)
    g.add_argument("--horizon", type=int)
    g.add_argument("--d-min", type=float, dest="d_min")
    g.add_argument("--d-max", type=float, dest="d_max")
    g.add_argument("--k", type=int)
    g.add_argument("--proprio-weight", type=float, dest="proprio_weight")
    g.add_argument("--zero-out", action="store_true", dest="zero_out", default=None)
    g.add_argument("--no-zero-out", action="store_false", dest="zero_out", default=None)
    g.add_argument("--align-radius", type=float, dest="align_radius")
    g.add_argument("--align-max-rot", type=float, dest="align_max_rot")
    g.add_argument("--exec-per-cycle", type=int, dest="exec_per_cycle")
    g.add_argument("--hysteresis", type=float)
    g.add_argument("--max-steps", type=int, dest="max_steps")
    g.add_argument("--base-exec-per-cycle", type=int, dest="base_exec_per_cycle")
    g.add_argument("--jobs", type=int)


def _config_from_args(args) -> RunConfig:
    overrides: dict = {}
    for flag, (section, key) in _FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    return load_config(args.config, overrides)


def _template(cfg: RunConfig) -> np.ndarray:
    return default_keypoint_template(cfg.sim.t_block)


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing input file {path}")
    return path


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def _embed_config(cfg: RunConfig) -> dict:
    c = canonical_dict(cfg)
    return {"config": c, "config_fingerprint": fingerprint(c)}


# ---------------------------------------------------------------------------
# subcommands


def cmd_demo_collect(args) -> int:
    cfg = _config_from_args(args)
    template = _template(cfg)
    demos, stats = collect_demos(
        cfg.sim, template, args.episodes, seed_start=args.seed_start,
        region=args.region.upper(),
    )
    save_episodes(args.out, demos, kind="base")
    summary = dict(stats)
    summary.update(_embed_config(cfg))
    _write_json(args.out + ".meta.json", summary)
    print(f"wrote {len(demos)} episodes to {args.out} "
          f"(expert success rate {stats['success_rate']:.2f})")
    return EXIT_OK


def cmd_build_rec(args) -> int:
    cfg = _config_from_args(args)
    demos, _ = load_episodes(_require(args.demos))
    rec = build_recovery_dataset(demos, _template(cfg))
    save_episodes(args.out, rec, kind="rec")
    print(f"wrote {len(rec)} recovery episodes to {args.out}")
    return EXIT_OK


def cmd_fit_manifold(args) -> int:
    cfg = _config_from_args(args)
    episodes, _ = load_episodes(_require(args.rec))
    frames = np.concatenate([ep.keypoints for ep in episodes])
    model = KeypointManifold(
        n_components=cfg.manifold.n_components,
        tol=cfg.em.tol,
        max_iter=cfg.em.max_iter,
        n_init=cfg.em.n_init,
        reg_floor=cfg.em.reg_floor,
        mag_scale=cfg.manifold.mag_scale,
        select_bic=cfg.manifold.select_bic,
        seed=cfg.manifold.seed,
    ).fit(frames)
    if not args.no_calibrate:
        model.calibrate(
            frames,
            mag_ref=cfg.manifold.mag_ref,
            mag_scale=cfg.manifold.mag_scale,
            density_threshold=cfg.manifold.density_threshold,
        )
    model.save(args.out)
    print(f"fitted manifold on {frames.shape[0]} frames -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config_from_args(args)
    model = KeypointManifold.load(_require(args.manifold))
    episodes, _ = load_episodes(_require(args.rec))
    frames = np.concatenate([ep.keypoints for ep in episodes])
    model.calibrate(
        frames,
        mag_ref=cfg.manifold.mag_ref,
        mag_scale=cfg.manifold.mag_scale,
        density_threshold=cfg.manifold.density_threshold,
    )
    model.save(args.out or args.manifold)
    print(
        f"calibrated: mag_ref={model.mag_ref_:.6g} mag_scale={model.mag_scale_:.6g} "
        f"density_threshold={model.density_threshold_:.6g}"
    )
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = _config_from_args(args)
    demos, _ = load_episodes(_require(args.demos))
    policy = KnnBasePolicy(
        k=cfg.policy.k, horizon=cfg.plan.horizon,
        proprio_weight=cfg.policy.proprio_weight,
        align_radius=cfg.policy.align_radius,
        align_max_rot=cfg.policy.align_max_rot,
    ).fit(demos)
    policy.save(args.out)
    print(f"indexed {policy.index_.x.shape[0]} windows -> {args.out}")
    return EXIT_OK


def cmd_train_inverse(args) -> int:
    cfg = _config_from_args(args)
    episodes, _ = load_episodes(_require(args.rec))
    seqs, skipped = extract_sequences(episodes, cfg.plan.horizon)
    policy = KnnInversePolicy(
        k=cfg.policy.k, horizon=cfg.plan.horizon,
        proprio_weight=cfg.policy.proprio_weight, zero_out=cfg.policy.zero_out,
    ).fit(seqs)
    policy.save(args.out)
    mode = "zeroed" if cfg.policy.zero_out else "raw"
    print(f"indexed {len(seqs)} {mode} windows ({skipped} short episodes skipped) -> {args.out}")
    return EXIT_OK


def _load_joint(args, cfg: RunConfig) -> JointPolicy:
    return JointPolicy(
        base=KnnBasePolicy.load(_require(args.base)),
        inverse=KnnInversePolicy.load(_require(args.inverse)),
        manifold=KeypointManifold.load(_require(args.manifold)),
        plan_cfg=cfg.plan,
        template=_template(cfg),
        exec_per_cycle=cfg.joint.exec_per_cycle,
        hysteresis=cfg.joint.hysteresis,
    )


def cmd_rollout(args) -> int:
    cfg = _config_from_args(args)
    region = args.region.upper()
    if args.policy == "joint":
        jp = _load_joint(args, cfg)
        trace = rollout(cfg.sim, jp, args.rollout_seed, region, cfg.eval.max_steps)
    else:
        base = KnnBasePolicy.load(_require(args.base))
        trace = rollout_base(
            cfg.sim, base, _template(cfg), args.rollout_seed, region,
            cfg.eval.base_exec_per_cycle, cfg.eval.max_steps,
        )
    trace.meta.update(_embed_config(cfg))
    if args.trace:
        save_trace(args.trace, trace)
    print(f"seed {args.rollout_seed} region {region}: {trace.status} in {trace.n_steps} steps")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    seeds = parse_seeds(args.seeds)
    region = args.region.upper()
    policy_id = args.policy_id or args.policy
    model_bytes = []
    if args.policy == "joint":
        jp = _load_joint(args, cfg)
        models = jp
        for p in (args.base, args.inverse, args.manifold):
            with open(p, "rb") as f:
                model_bytes.append(f.read())
    else:
        base = KnnBasePolicy.load(_require(args.base))
        models = (base, _template(cfg))
        with open(args.base, "rb") as f:
            model_bytes.append(f.read())
    exec_per_cycle = (
        cfg.joint.exec_per_cycle if args.policy == "joint" else cfg.eval.base_exec_per_cycle
    )
    report = eval_suite(
        cfg.sim, args.policy, models, region, seeds,
        policy_id=policy_id,
        exec_per_cycle=exec_per_cycle,
        max_steps=cfg.eval.max_steps,
        jobs=cfg.eval.jobs,
        config_dict=canonical_dict(cfg),
        extra_fingerprint=fingerprint(*model_bytes),
    )
    with open(args.out, "w") as f:
        f.write(report.to_json())
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("\n".join(report.csv_rows()) + "\n")
    print(f"{policy_id} {region}: success_rate={report.success_rate:.3f} "
          f"({sum(report.successes)}/{len(seeds)}) -> {args.out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _config_from_args(args)
    jp = _load_joint(args, cfg)
    demos, _ = load_episodes(_require(args.demos))
    aug = collect_aug_demos(
        cfg.sim, jp, args.n_inits, seed_start=args.seed_start,
        max_steps=cfg.eval.max_steps,
    )
    if aug.episodes:
        save_episodes(args.out_aug, aug.episodes, kind="base")
    retrained = retrain_augmented(
        demos, aug, k=cfg.policy.k, horizon=cfg.plan.horizon,
        proprio_weight=cfg.policy.proprio_weight,
        align_radius=cfg.policy.align_radius,
        align_max_rot=cfg.policy.align_max_rot,
    )
    retrained.save(args.out_base)
    summary = dict(aug.provenance)
    summary["n_recorded"] = len(aug.episodes)
    summary.update(_embed_config(cfg))
    _write_json(args.out_aug + ".meta.json", summary)
    print(
        f"recorded {len(aug.episodes)}/{args.n_inits} recovery episodes "
        f"({aug.provenance['n_timeout']} timeouts) -> {args.out_aug}; "
        f"augmented policy -> {args.out_base}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config_from_args(args)
    os.makedirs(args.out_dir, exist_ok=True)
    wrote = []
    if args.reports:
        rates = {}
        csv_rows = ["policy_id,region,seed,success,steps"]
        for path in args.reports:
            with open(_require(path)) as f:
                from .harness import EvalReport

                rep = EvalReport.from_json(f.read())
            rates[f"{rep.policy_id}/{rep.region}"] = rep.success_rate
            csv_rows.extend(rep.csv_rows()[1:])
        csv_path = os.path.join(args.out_dir, "results.csv")
        with open(csv_path, "w") as f:
            f.write("\n".join(csv_rows) + "\n")
        bars_path = os.path.join(args.out_dir, "success_rates.svg")
        with open(bars_path, "w") as f:
            f.write(svgplot.bars_svg(rates))
        wrote += [csv_path, bars_path]
    if args.trace:
        trace = load_trace(_require(args.trace))
        dens = [ts.density for ts in trace.steps if ts.density is not None]
        if dens and args.manifold:
            model = KeypointManifold.load(_require(args.manifold))
            curve = svgplot.density_curve_svg(dens, model.density_threshold_)
            path = os.path.join(args.out_dir, "density_curve.svg")
            with open(path, "w") as f:
                f.write(curve)
            wrote.append(path)
        if trace.steps:
            first = trace.steps[0]
            frame = svgplot.frame_svg(
                cfg.sim, first.block_pose, first.ee_pos,
                first.block_pose.transform(_template(cfg)),
            )
            path = os.path.join(args.out_dir, "first_frame.svg")
            with open(path, "w") as f:
                f.write(frame)
            wrote.append(path)
    if args.manifold and args.quiver:
        model = KeypointManifold.load(_require(args.manifold))
        path = os.path.join(args.out_dir, "recovery_field.svg")
        with open(path, "w") as f:
            f.write(svgplot.quiver_svg(cfg.sim, model, _template(cfg)))
        wrote.append(path)
    if not wrote:
        raise ValueError("nothing to report: pass --reports, --trace, or --quiver")
    print("wrote " + ", ".join(wrote))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="oodrecover",
        description="Keypoint-density OOD recovery pipeline for a planar push task.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("demo-collect", help="run the scripted expert and record demos")
    _add_config_flags(sp)
    sp.add_argument("--episodes", type=int, default=100)
    sp.add_argument("--region", default="ID", choices=["ID", "OOD", "ANY", "id", "ood", "any"])
    sp.add_argument("--seed-start", type=int, default=0, dest="seed_start")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_demo_collect)

    sp = sub.add_parser("build-rec", help="recompute keypoints from poses (demo -> recovery dataset)")
    _add_config_flags(sp)
    sp.add_argument("--demos", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_rec)

    sp = sub.add_parser("fit-manifold", help="fit per-keypoint mixture models")
    _add_config_flags(sp)
    sp.add_argument("--rec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-calibrate", action="store_true")
    sp.set_defaults(func=cmd_fit_manifold)

    sp = sub.add_parser("calibrate", help="set gradient shaping and the OOD threshold")
    _add_config_flags(sp)
    sp.add_argument("--manifold", required=True)
    sp.add_argument("--rec", required=True)
    sp.add_argument("--out", help="defaults to rewriting the input model")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("train-base", help="index the base behavior-cloning policy")
    _add_config_flags(sp)
    sp.add_argument("--demos", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("train-inverse", help="index the keypoint inverse policy")
    _add_config_flags(sp)
    sp.add_argument("--rec", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_inverse)

    sp = sub.add_parser("rollout", help="run one episode and dump its trace")
    _add_config_flags(sp)
    sp.add_argument("--policy", default="joint", choices=["joint", "base"])
    sp.add_argument("--base")
    sp.add_argument("--inverse")
    sp.add_argument("--manifold")
    sp.add_argument("--rollout-seed", type=int, default=0, dest="rollout_seed")
    sp.add_argument("--region", default="OOD", choices=["ID", "OOD", "ANY", "id", "ood", "any"])
    sp.add_argument("--trace")
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("eval", help="evaluate a policy over a seed list")
    _add_config_flags(sp)
    sp.add_argument("--policy", default="joint", choices=["joint", "base"])
    sp.add_argument("--policy-id", dest="policy_id")
    sp.add_argument("--base")
    sp.add_argument("--inverse")
    sp.add_argument("--manifold")
    sp.add_argument("--region", required=True, choices=["ID", "OOD", "ANY", "id", "ood", "any"])
    sp.add_argument("--seeds", required=True, help='e.g. "0..29" or "1,5,9"')
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("augment", help="collect recovery demos OOD and retrain the base policy")
    _add_config_flags(sp)
    sp.add_argument("--demos", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--inverse", required=True)
    sp.add_argument("--manifold", required=True)
    sp.add_argument("--n-inits", type=int, default=100, dest="n_inits")
    sp.add_argument("--seed-start", type=int, default=1000, dest="seed_start")
    sp.add_argument("--out-aug", required=True, dest="out_aug")
    sp.add_argument("--out-base", required=True, dest="out_base")
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("report", help="CSV and SVG summaries from reports and traces")
    _add_config_flags(sp)
    sp.add_argument("--reports", nargs="*")
    sp.add_argument("--trace")
    sp.add_argument("--manifold")
    sp.add_argument("--quiver", action="store_true")
    sp.add_argument("--out-dir", required=True, dest="out_dir")
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001 - single-line runtime error contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
