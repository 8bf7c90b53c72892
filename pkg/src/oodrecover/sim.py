"""Deterministic planar push environment: disc end-effector vs. T-shaped block.

The contact model is quasi-static: the block moves only while the end-effector
overlaps it, and each step projects the block out of penetration (translation
plus a rotational correction from the contact-arm cross product). There is no
velocity state, so the block is at rest whenever the disc is not touching it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from shapely.geometry import Polygon

from .geom import Pose2, as_keypoints, wrap_angle

PEN_TOL = 1e-9

ID, OOD, ANY = "ID", "OOD", "ANY"


def _wrap_vec(angles: np.ndarray) -> np.ndarray:
    """Vectorized angle wrap to [-pi, pi); endpoint detail is irrelevant here."""
    return (angles + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class TBlockSpec:
    """T-shaped block: a horizontal bar with a stem hanging below its center.

    All quantities are expressed in a local frame with the area centroid at
    the origin; the block pose positions that centroid in the workspace.
    """

    bar_w: float = 120.0
    bar_h: float = 30.0
    stem_w: float = 30.0
    stem_h: float = 90.0

    def __post_init__(self):
        for name in ("bar_w", "bar_h", "stem_w", "stem_h"):
            if getattr(self, name) <= 0:
                raise ValueError(f"t_block.{name} must be positive")
        if self.stem_w > self.bar_w:
            raise ValueError("stem wider than bar is not a T shape")


@lru_cache(maxsize=16)
def _block_geometry(spec: TBlockSpec) -> dict:
    a_bar = spec.bar_w * spec.bar_h
    a_stem = spec.stem_w * spec.stem_h
    # centroid offset in a frame where the bar is centered at the origin
    c_y = a_stem * (-(spec.bar_h + spec.stem_h) / 2.0) / (a_bar + a_stem)
    bar_lo = np.array([-spec.bar_w / 2.0, -spec.bar_h / 2.0 - c_y])
    bar_hi = np.array([spec.bar_w / 2.0, spec.bar_h / 2.0 - c_y])
    stem_lo = np.array([-spec.stem_w / 2.0, -spec.bar_h / 2.0 - spec.stem_h - c_y])
    stem_hi = np.array([spec.stem_w / 2.0, -spec.bar_h / 2.0 - c_y])
    outline = np.array(
        [
            [bar_lo[0], bar_lo[1]],
            [bar_lo[0], bar_hi[1]],
            [bar_hi[0], bar_hi[1]],
            [bar_hi[0], bar_lo[1]],
            [stem_hi[0], stem_hi[1]],
            [stem_hi[0], stem_lo[1]],
            [stem_lo[0], stem_lo[1]],
            [stem_lo[0], stem_hi[1]],
        ]
    )

    def rect_inertia(lo, hi):
        w, h = hi - lo
        c = (lo + hi) / 2.0
        area = w * h
        return area * ((w * w + h * h) / 12.0 + c @ c)

    area = a_bar + a_stem
    inertia = (rect_inertia(bar_lo, bar_hi) + rect_inertia(stem_lo, stem_hi)) / area
    return {
        "rects": ((bar_lo, bar_hi), (stem_lo, stem_hi)),
        "outline": outline,
        "area": area,
        "inertia": inertia,
        "circumradius": float(np.max(np.linalg.norm(outline, axis=1))),
    }


def default_keypoint_template(spec: TBlockSpec = TBlockSpec()) -> np.ndarray:
    """Five keypoints: centroid, both bar tips, stem tip, bar/stem junction."""
    geo = _block_geometry(spec)
    (bar_lo, bar_hi), (stem_lo, stem_hi) = geo["rects"]
    bar_mid_y = (bar_lo[1] + bar_hi[1]) / 2.0
    return np.array(
        [
            [0.0, 0.0],
            [bar_lo[0], bar_mid_y],
            [bar_hi[0], bar_mid_y],
            [0.0, stem_lo[1]],
            [0.0, bar_lo[1]],
        ]
    )


@dataclass(frozen=True)
class ExpertConfig:
    """Tuning knobs for the scripted push controller."""

    probe_step: float = 5.0       # push magnitude used to score candidate contacts
    standoff_gap: float = 2.0     # gap between disc surface and block at standoff
    push_depth: float = 8.0       # how far beyond the contact face to command
    align_tol: float = 5.0        # max perpendicular offset from the push axis
    align_reach: float = 8.0      # how far behind the standoff still counts aligned
    path_clear: float = 4.0       # required clearance when moving to a standoff
    orbit_step: float = 0.5       # angular step (rad) when circling the block
    approach_penalty: float = 0.004  # score penalty per unit distance to standoff
    rot_weight: float = 0.5       # pose-error weight on |dtheta| * circumradius
    stickiness: float = 0.3       # keep pushing an aligned site scoring this
                                  # fraction of the best candidate


@dataclass(frozen=True)
class SimConfig:
    workspace: tuple[float, float] = (512.0, 512.0)
    ee_radius: float = 15.0
    t_block: TBlockSpec = field(default_factory=TBlockSpec)
    target_pose: Pose2 = field(default_factory=lambda: Pose2(200.0, 256.0, 0.0))
    dt: float = 0.1
    max_push_speed: float = 10.0
    friction: float = 1.0
    damping: float = 1.0
    success_coverage: float = 0.90
    max_steps: int = 300
    id_axis: str = "x"
    id_side: str = "low"
    id_boundary: float = 256.0
    reset_margin: float = 80.0
    contact_iters: int = 8
    seed: int = 0
    expert: ExpertConfig = field(default_factory=ExpertConfig)

    def __post_init__(self):
        if self.ee_radius <= 0:
            raise ValueError("ee_radius must be positive")
        if not (0.0 < self.success_coverage <= 1.0):
            raise ValueError("success_coverage must be in (0, 1]")
        if self.workspace[0] <= 0 or self.workspace[1] <= 0:
            raise ValueError("workspace extents must be positive")
        if self.max_push_speed <= 0:
            raise ValueError("max_push_speed must be positive")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must be in (0, 1]")
        if self.friction < 0:
            raise ValueError("friction must be non-negative")
        if self.id_axis not in ("x", "y"):
            raise ValueError("id_axis must be 'x' or 'y'")
        if self.id_side not in ("low", "high"):
            raise ValueError("id_side must be 'low' or 'high'")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass(frozen=True, eq=False)
class SimState:
    """Snapshot of the environment; treat as immutable."""

    block_pose: Pose2
    ee_pos: np.ndarray  # (2,) disc center
    step_count: int = 0
    seed: int = 0       # episode stream key, recorded for provenance


# ---------------------------------------------------------------------------
# geometry queries


def _closest_on_rect(p, lo, hi):
    """Signed distance from a point to an axis-aligned rectangle.

    Returns ``(dist, surface_point, outward_normal)``; ``dist`` is negative
    when the point is inside the rectangle.
    """
    qx = min(max(p[0], lo[0]), hi[0])
    qy = min(max(p[1], lo[1]), hi[1])
    if qx != p[0] or qy != p[1]:
        dx, dy = p[0] - qx, p[1] - qy
        d = math.hypot(dx, dy)
        return d, (qx, qy), (dx / d, dy / d)
    # inside: push out through the nearest wall
    dl, dr = p[0] - lo[0], hi[0] - p[0]
    db, dtp = p[1] - lo[1], hi[1] - p[1]
    m = min(dl, dr, db, dtp)
    if m == dl:
        return -m, (lo[0], p[1]), (-1.0, 0.0)
    if m == dr:
        return -m, (hi[0], p[1]), (1.0, 0.0)
    if m == db:
        return -m, (p[0], lo[1]), (0.0, -1.0)
    return -m, (p[0], hi[1]), (0.0, 1.0)


def block_signed_distance(pose: Pose2, point, spec: TBlockSpec) -> float:
    """Signed distance from a workspace point to the block (negative inside)."""
    p = pose.inverse().transform(point)
    geo = _block_geometry(spec)
    return min(_closest_on_rect(p, lo, hi)[0] for lo, hi in geo["rects"])


@dataclass(frozen=True)
class Contact:
    depth: float              # penetration of the disc into the block
    point: np.ndarray         # contact point on the block surface (world)
    normal: np.ndarray        # outward block normal at the contact (world)


def disc_block_contact(pose: Pose2, ee_pos, cfg: SimConfig) -> Contact | None:
    """Deepest contact between the end-effector disc and the block, if any."""
    inv = pose.inverse()
    p = inv.transform(ee_pos)
    geo = _block_geometry(cfg.t_block)
    best = None
    for lo, hi in geo["rects"]:
        d, q, n = _closest_on_rect(p, lo, hi)
        if best is None or d < best[0]:
            best = (d, q, n)
    dist, q_loc, n_loc = best
    depth = cfg.ee_radius - dist
    if depth <= 0.0:
        return None
    return Contact(
        depth=depth,
        point=pose.transform(np.asarray(q_loc)),
        normal=pose.rotate_only(np.asarray(n_loc)),
    )


def penetration_depth(s: SimState, cfg: SimConfig) -> float:
    """Overlap depth between disc and block; 0 when separated."""
    c = disc_block_contact(s.block_pose, s.ee_pos, cfg)
    return 0.0 if c is None else c.depth


# ---------------------------------------------------------------------------
# region predicate / reset / step


def region_of(pose: Pose2, cfg: SimConfig) -> str:
    """Classify a block pose by the configured centroid predicate.

    The boundary itself is assigned to ID.
    """
    coord = pose.x if cfg.id_axis == "x" else pose.y
    if cfg.id_side == "low":
        return ID if coord <= cfg.id_boundary else OOD
    return ID if coord >= cfg.id_boundary else OOD


def clip_to_workspace(point, cfg: SimConfig) -> np.ndarray:
    p = np.asarray(point, dtype=float)
    return np.clip(p, [0.0, 0.0], [cfg.workspace[0], cfg.workspace[1]])


_MAX_REJECT = 10_000


def reset(cfg: SimConfig, seed: int, region: str = ANY) -> SimState:
    """Sample an initial state: block centroid uniform over the requested
    region (inset by ``reset_margin``), uniform orientation, end-effector
    uniform over the workspace and not penetrating the block.
    """
    if region not in (ID, OOD, ANY):
        raise ValueError(f"unknown region {region!r}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(seed)]))
    m = cfg.reset_margin
    lo = np.array([m, m])
    hi = np.array([cfg.workspace[0] - m, cfg.workspace[1] - m])
    if np.any(hi <= lo):
        raise ValueError("reset_margin leaves no sampling area")

    pose = None
    for _ in range(_MAX_REJECT):
        xy = rng.uniform(lo, hi)
        theta = rng.uniform(-math.pi, math.pi)
        cand = Pose2(xy[0], xy[1], theta)
        if region == ANY or region_of(cand, cfg) == region:
            pose = cand
            break
    if pose is None:
        raise ValueError(f"empty reset region {region!r}")

    ee = None
    for _ in range(_MAX_REJECT):
        cand = rng.uniform([0.0, 0.0], list(cfg.workspace))
        if disc_block_contact(pose, cand, cfg) is None:
            ee = cand
            break
    if ee is None:
        raise ValueError("could not place end-effector outside the block")
    return SimState(block_pose=pose, ee_pos=ee, step_count=0, seed=int(seed))


def _resolve_contact(pose: Pose2, ee, cfg: SimConfig) -> Pose2:
    """Project the block out of penetration with the (fixed) disc."""
    geo = _block_geometry(cfg.t_block)
    inertia = geo["inertia"]
    for _ in range(cfg.contact_iters):
        c = disc_block_contact(pose, ee, cfg)
        if c is None or c.depth <= PEN_TOL:
            return pose
        n_in = -c.normal
        arm = c.point - pose.position
        cr = arm[0] * n_in[1] - arm[1] * n_in[0]
        w = 1.0 + cfg.friction * cr * cr / inertia
        lam = cfg.damping * c.depth / w
        pose = Pose2(
            pose.x + lam * n_in[0],
            pose.y + lam * n_in[1],
            pose.theta + cfg.friction * lam * cr / inertia,
        )
    # translation-only fallback guarantees separation even when the
    # rotational correction keeps re-introducing overlap
    for _ in range(cfg.contact_iters):
        c = disc_block_contact(pose, ee, cfg)
        if c is None or c.depth <= PEN_TOL:
            break
        pose = Pose2(
            pose.x - c.depth * c.normal[0],
            pose.y - c.depth * c.normal[1],
            pose.theta,
        )
    return pose


def step(s: SimState, action, cfg: SimConfig) -> SimState:
    """Advance one control tick toward the commanded end-effector target."""
    target = clip_to_workspace(action, cfg)
    delta = target - s.ee_pos
    dist = math.hypot(delta[0], delta[1])
    if dist <= cfg.max_push_speed:
        ee = target
    else:
        ee = s.ee_pos + delta * (cfg.max_push_speed / dist)

    pose = _resolve_contact(s.block_pose, ee, cfg)

    # keep the centroid inside the workspace; if the clamp re-introduced
    # overlap (block pinned against a wall), the disc retreats instead
    cx = min(max(pose.x, 0.0), cfg.workspace[0])
    cy = min(max(pose.y, 0.0), cfg.workspace[1])
    if cx != pose.x or cy != pose.y:
        pose = Pose2(cx, cy, pose.theta)
        for _ in range(cfg.contact_iters):
            c = disc_block_contact(pose, ee, cfg)
            if c is None or c.depth <= PEN_TOL:
                break
            ee = ee + c.normal * c.depth
        ee = clip_to_workspace(ee, cfg)
    return SimState(block_pose=pose, ee_pos=np.asarray(ee, dtype=float),
                    step_count=s.step_count + 1, seed=s.seed)


# ---------------------------------------------------------------------------
# coverage


def block_polygon(pose: Pose2, spec: TBlockSpec) -> Polygon:
    return Polygon(pose.transform(_block_geometry(spec)["outline"]))


@lru_cache(maxsize=16)
def _target_polygon(cfg: SimConfig) -> Polygon:
    return block_polygon(cfg.target_pose, cfg.t_block)


def coverage(s: SimState, cfg: SimConfig) -> float:
    """Fraction of the block's area overlapping its target footprint."""
    poly = block_polygon(s.block_pose, cfg.t_block)
    inter = poly.intersection(_target_polygon(cfg)).area
    return inter / _block_geometry(cfg.t_block)["area"]


def is_success(s: SimState, cfg: SimConfig) -> bool:
    return coverage(s, cfg) >= cfg.success_coverage


# ---------------------------------------------------------------------------
# observations


def observe(s: SimState, template: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keypoint observation plus proprioception (the disc center)."""
    return s.block_pose.transform(template), np.array(s.ee_pos, dtype=float)


# ---------------------------------------------------------------------------
# scripted expert


@lru_cache(maxsize=16)
def _push_sites(spec: TBlockSpec, ee_radius: float, gap: float):
    """Candidate contact sites on the block outline, in the local frame.

    Returns ``(sites, inward_normals)``; sites on interior boundary segments
    (the glued bar/stem junction) and sites whose standoff disc cannot fit
    (concave corners) are discarded.
    """
    geo = _block_geometry(spec)
    rects = geo["rects"]
    sites = []
    normals = []
    for lo, hi in rects:
        faces = (
            ((lo[0], lo[1]), (lo[0], hi[1]), (1.0, 0.0)),    # left face
            ((hi[0], lo[1]), (hi[0], hi[1]), (-1.0, 0.0)),   # right face
            ((lo[0], lo[1]), (hi[0], lo[1]), (0.0, 1.0)),    # bottom face
            ((lo[0], hi[1]), (hi[0], hi[1]), (0.0, -1.0)),   # top face
        )
        for a, b, n_in in faces:
            a = np.asarray(a)
            b = np.asarray(b)
            length = np.linalg.norm(b - a)
            fracs = (0.1, 0.3, 0.5, 0.7, 0.9) if length > 60 else (0.2, 0.5, 0.8)
            for f in fracs:
                site = a + f * (b - a)
                n = np.asarray(n_in)
                probe = site - 1e-6 * n
                if any(_closest_on_rect(probe, l, h)[0] < 0 for l, h in rects):
                    continue  # interior segment, not a real face
                standoff = site - (ee_radius + gap) * n
                if min(_closest_on_rect(standoff, l, h)[0] for l, h in rects) < ee_radius - 0.5:
                    continue  # disc cannot fit at the standoff
                sites.append(site)
                normals.append(n)
    return np.array(sites), np.array(normals)


def _pose_error(pose: Pose2, cfg: SimConfig) -> float:
    geo = _block_geometry(cfg.t_block)
    tgt = cfg.target_pose
    dp = math.hypot(pose.x - tgt.x, pose.y - tgt.y)
    dth = abs(wrap_angle(pose.theta - tgt.theta))
    return dp + cfg.expert.rot_weight * dth * geo["circumradius"]


def _score_push_sites(s: SimState, cfg: SimConfig):
    """Score every candidate contact by predicted pose-error reduction.

    Candidate pushes are scored with the same penetration-projection response
    the stepper uses, so the prediction matches the actual contact dynamics.
    Returns world-frame ``(sites, inward_normals, standoffs, scores)``.
    """
    ex = cfg.expert
    geo = _block_geometry(cfg.t_block)
    inertia = geo["inertia"]
    pose = s.block_pose
    sites_loc, normals_loc = _push_sites(cfg.t_block, cfg.ee_radius, ex.standoff_gap)
    sites = pose.transform(sites_loc)
    n_in = pose.rotate_only(normals_loc)
    center = pose.position

    err_now = _pose_error(pose, cfg)
    probe = min(ex.probe_step, max(0.5, err_now))
    arm = sites - center
    cr = arm[:, 0] * n_in[:, 1] - arm[:, 1] * n_in[:, 0]
    w = 1.0 + cfg.friction * cr * cr / inertia
    lam = probe / w
    new_pos = center + n_in * lam[:, None]
    new_theta = pose.theta + cfg.friction * lam * cr / inertia

    tgt = cfg.target_pose
    dp = np.hypot(new_pos[:, 0] - tgt.x, new_pos[:, 1] - tgt.y)
    dth = np.abs(_wrap_vec(new_theta - tgt.theta))
    err_new = dp + ex.rot_weight * dth * geo["circumradius"]
    score = err_now - err_new

    standoffs = sites - (cfg.ee_radius + ex.standoff_gap) * n_in
    inside = (
        (standoffs[:, 0] >= 0.0)
        & (standoffs[:, 0] <= cfg.workspace[0])
        & (standoffs[:, 1] >= 0.0)
        & (standoffs[:, 1] <= cfg.workspace[1])
    )
    score = np.where(inside, score, -np.inf)
    # mild preference for contacts near the current disc position
    score = score - ex.approach_penalty * np.hypot(
        standoffs[:, 0] - s.ee_pos[0], standoffs[:, 1] - s.ee_pos[1]
    )
    return sites, n_in, standoffs, score


def select_push_site(s: SimState, cfg: SimConfig):
    """Best-scoring contact: ``(site, inward_normal, standoff, score)``."""
    sites, n_in, standoffs, score = _score_push_sites(s, cfg)
    best = int(np.argmax(score))
    return sites[best], n_in[best], standoffs[best], float(score[best])


def _path_is_clear(pose: Pose2, spec: TBlockSpec, start, end, clearance: float) -> bool:
    """Whether the disc can slide start -> end without crossing the block.

    Both endpoints may legitimately sit right next to the block (the disc is
    leaving one contact for another), so the requirement is capped by the
    endpoint clearances rather than applied uniformly.
    """
    ts = np.linspace(0.0, 1.0, 12)
    pts = np.asarray(start)[None, :] + ts[:, None] * (np.asarray(end) - np.asarray(start))[None, :]
    inv = pose.inverse()
    pts_loc = inv.transform(pts)
    geo = _block_geometry(spec)
    dists = [min(_closest_on_rect(p, lo, hi)[0] for lo, hi in geo["rects"]) for p in pts_loc]
    required = max(1.0, min(clearance, min(dists[0], dists[-1]) - 0.5))
    return all(d >= required for d in dists)


def scripted_expert(s: SimState, cfg: SimConfig, rng=None) -> np.ndarray:
    """Greedy push controller used to generate demonstrations.

    Holds position once the block covers the target; otherwise keeps pushing
    an already-aligned contact while it stays productive, and only then moves
    to the best-scoring standoff (circling the block when the direct path is
    blocked). ``rng`` is accepted for interface compatibility; the default
    controller is deterministic.
    """
    if is_success(s, cfg):
        return np.array(s.ee_pos, dtype=float)

    ex = cfg.expert
    sites, normals, standoffs, scores = _score_push_sites(s, cfg)
    best = int(np.argmax(scores))
    ee = s.ee_pos

    to_sites = sites - ee
    along = to_sites[:, 0] * normals[:, 0] + to_sites[:, 1] * normals[:, 1]
    perp = np.abs(to_sites[:, 0] * normals[:, 1] - to_sites[:, 1] * normals[:, 0])
    max_along = cfg.ee_radius + ex.standoff_gap + ex.align_reach
    aligned = (along > 0.0) & (along <= max_along) & (perp <= ex.align_tol)
    # stickiness: an aligned contact wins while it scores a decent fraction
    # of the best, saving a trip around the block
    keep = aligned & (scores > 0.0) & (scores >= ex.stickiness * scores[best])
    if np.any(keep):
        cand = np.where(keep, scores, -np.inf)
        pick = int(np.argmax(cand))
        err = _pose_error(s.block_pose, cfg)
        depth = min(ex.push_depth, max(1.0, 0.9 * err))
        return sites[pick] + depth * normals[pick]
    site, n_in, standoff = sites[best], normals[best], standoffs[best]

    clearance = cfg.ee_radius + ex.path_clear
    if _path_is_clear(s.block_pose, cfg.t_block, ee, standoff, clearance):
        return standoff

    # circle around the block toward the standoff, spiralling inward
    center = s.block_pose.position
    v_ee = ee - center
    v_st = standoff - center
    ang_ee = math.atan2(v_ee[1], v_ee[0])
    ang_st = math.atan2(v_st[1], v_st[0])
    d_ang = wrap_angle(ang_st - ang_ee)
    sign = 1.0 if d_ang >= 0 else -1.0
    ring = _block_geometry(cfg.t_block)["circumradius"] + clearance + 2.0
    radius = max(ring, 0.85 * float(np.linalg.norm(v_ee)))
    ang = ang_ee + sign * min(ex.orbit_step, abs(d_ang))
    waypoint = center + radius * np.array([math.cos(ang), math.sin(ang)])
    return clip_to_workspace(waypoint, cfg)
