"""Synthetic articulated figures: the same textured figure rendered in two poses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pose import J, LIMB_JOINTS, NUM_JOINTS, Part, Pose


@dataclass(frozen=True)
class SyntheticFigureSpec:
    seed: int = 0
    height: int = 64
    width: int = 32
    limb_half_width: float = 2.0
    head_radius: float = 4.0
    stripe_prob: float = 0.5
    stripe_period: float = 4.0
    # joint angles in degrees; arms/legs measured from straight down, positive = away from the body
    upper_arm_range: tuple = (-25.0, 120.0)
    lower_arm_range: tuple = (-90.0, 90.0)
    upper_leg_range: tuple = (-15.0, 40.0)
    lower_leg_range: tuple = (-35.0, 35.0)
    shift_range: float = 2.0
    occlusion_prob: float = 0.0
    margin: float = 1.0


@dataclass(frozen=True)
class Appearance:
    part_colors: np.ndarray  # (10, 3)
    stripe_colors: np.ndarray  # (10, 3)
    striped: np.ndarray  # (10,) bool


@dataclass
class FigurePair:
    x_a: np.ndarray
    x_b: np.ndarray
    pose_a: Pose
    pose_b: Pose
    mask_a: np.ndarray = field(repr=False)
    mask_b: np.ndarray = field(repr=False)


def _rot(v, deg):
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def sample_pose(spec: SyntheticFigureSpec, rng: np.random.Generator) -> Pose:
    """Frontal figure; COCO 'right' joints appear on the image left. All joints visible."""
    s = spec.height / 64.0
    H, W = spec.height, spec.width
    for _ in range(200):
        xy = np.zeros((NUM_JOINTS, 2))
        neck = np.array([W / 2.0, 14.0 * s]) + rng.uniform(-spec.shift_range, spec.shift_range, 2)
        xy[J["neck"]] = neck
        turn = rng.uniform(-1.0, 1.0)
        nose = neck + np.array([turn, -6.0 * s])
        xy[J["nose"]] = nose
        xy[J["r_eye"]] = nose + np.array([-1.5 * s + 0.5 * turn, -1.5 * s])
        xy[J["l_eye"]] = nose + np.array([1.5 * s + 0.5 * turn, -1.5 * s])
        xy[J["r_ear"]] = nose + np.array([-3.0 * s, -0.5 * s])
        xy[J["l_ear"]] = nose + np.array([3.0 * s, -0.5 * s])
        xy[J["r_shoulder"]] = neck + np.array([-5.0 * s, 1.0 * s])
        xy[J["l_shoulder"]] = neck + np.array([5.0 * s, 1.0 * s])
        xy[J["r_hip"]] = neck + np.array([-3.0 * s, 18.0 * s])
        xy[J["l_hip"]] = neck + np.array([3.0 * s, 18.0 * s])

        down = np.array([0.0, 1.0])
        for side, sign in (("r", -1.0), ("l", 1.0)):
            # positive angle swings the limb outward: rotate "down" towards sign*x
            a1 = rng.uniform(*spec.upper_arm_range)
            a2 = a1 + rng.uniform(*spec.lower_arm_range)
            d1 = _rot(down, -sign * a1)
            d2 = _rot(down, -sign * a2)
            xy[J[f"{side}_elbow"]] = xy[J[f"{side}_shoulder"]] + 9.0 * s * d1
            xy[J[f"{side}_wrist"]] = xy[J[f"{side}_elbow"]] + 8.0 * s * d2
            l1 = rng.uniform(*spec.upper_leg_range)
            l2 = l1 + rng.uniform(*spec.lower_leg_range)
            xy[J[f"{side}_knee"]] = xy[J[f"{side}_hip"]] + 12.0 * s * _rot(down, -sign * l1)
            xy[J[f"{side}_ankle"]] = xy[J[f"{side}_knee"]] + 12.0 * s * _rot(down, -sign * l2)

        m = spec.margin
        if (xy[:, 0].min() >= m and xy[:, 0].max() <= W - 1 - m
                and xy[:, 1].min() >= m and xy[:, 1].max() <= H - 1 - m):
            visible = np.ones(NUM_JOINTS, dtype=bool)
            if spec.occlusion_prob > 0 and rng.random() < spec.occlusion_prob:
                limb = list(LIMB_JOINTS.values())[rng.integers(len(LIMB_JOINTS))]
                visible[limb[1]] = False
            return Pose(xy, visible)
    raise RuntimeError("could not sample an in-frame pose; image too small for the figure")


def sample_appearance(spec: SyntheticFigureSpec, rng: np.random.Generator) -> Appearance:
    colors = rng.uniform(-0.8, 0.8, (len(Part), 3))
    stripe = np.clip(colors + rng.choice([-0.6, 0.6], (len(Part), 1)), -1, 1)
    striped = rng.random(len(Part)) < spec.stripe_prob
    striped[Part.HEAD] = False
    return Appearance(colors, stripe, striped)


def _segment_coords(xs, ys, p1, p2):
    d = p2 - p1
    length = max(float(np.hypot(*d)), 1e-9)
    u = d / length
    t = (xs - p1[0]) * u[0] + (ys - p1[1]) * u[1]
    tc = np.clip(t, 0, length)
    dist = np.hypot(xs - (p1[0] + tc * u[0]), ys - (p1[1] + tc * u[1]))
    return t, dist


def render_figure(pose: Pose, app: Appearance, background: np.ndarray,
                  spec: SyntheticFigureSpec) -> tuple[np.ndarray, np.ndarray]:
    """Returns (image in [-1, 1] of shape (h, w, 3), foreground mask)."""
    H, W = spec.height, spec.width
    s = H / 64.0
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.empty((H, W, 3))
    img[:] = background
    fg = np.zeros((H, W), dtype=bool)
    xy = pose.xy

    def paint(part, inside, stripe_coord):
        color = np.where(
            (app.striped[part] & (np.floor(stripe_coord / spec.stripe_period) % 2 == 1))[..., None],
            app.stripe_colors[part], app.part_colors[part])
        img[inside] = color[inside]
        fg[inside] = True

    # torso: quad through shoulders and hips, stripes run across the body axis
    neck = xy[J["neck"]]
    hip_mid = 0.5 * (xy[J["r_hip"]] + xy[J["l_hip"]])
    t, dist = _segment_coords(xs, ys, neck, hip_mid)
    half = 0.5 * np.hypot(*(xy[J["l_shoulder"]] - xy[J["r_shoulder"]])) + 0.5 * s
    paint(Part.TORSO, (t >= 0) & (t <= np.hypot(*(hip_mid - neck)) + 1.0) & (dist <= half), t)

    for part in (Part.R_UPPER_LEG, Part.L_UPPER_LEG, Part.R_LOWER_LEG, Part.L_LOWER_LEG,
                 Part.R_UPPER_ARM, Part.L_UPPER_ARM, Part.R_LOWER_ARM, Part.L_LOWER_ARM):
        a, b = LIMB_JOINTS[part]
        t, dist = _segment_coords(xs, ys, xy[a], xy[b])
        paint(part, dist <= spec.limb_half_width * s, t)

    head_c = xy[J["nose"]] + np.array([0.0, -0.5 * s])
    dist = np.hypot(xs - head_c[0], ys - head_c[1])
    paint(Part.HEAD, dist <= spec.head_radius * s, ys)
    return img, fg.astype(np.uint8)


def _background(rng, app: Appearance) -> np.ndarray:
    for _ in range(100):
        bg = rng.uniform(-1.0, 1.0, 3)
        if np.abs(app.part_colors - bg).sum(axis=1).min() > 0.4:
            return bg
    return bg


def generate_synthetic_pair(spec: SyntheticFigureSpec, rng: np.random.Generator | int | None = None) -> FigurePair:
    """Same figure and texture in two independently sampled poses, on different flat backgrounds."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    app = sample_appearance(spec, rng)
    pose_a = sample_pose(spec, rng)
    pose_b = sample_pose(spec, rng)
    x_a, m_a = render_figure(pose_a, app, _background(rng, app), spec)
    x_b, m_b = render_figure(pose_b, app, _background(rng, app), spec)
    return FigurePair(x_a, x_b, pose_a, pose_b, m_a, m_b)


def generate_dataset(spec: SyntheticFigureSpec, count: int, seed: int | None = None) -> list[FigurePair]:
    """``count`` pairs; pair i depends only on (seed, i)."""
    base = spec.seed if seed is None else seed
    return [generate_synthetic_pair(spec, np.random.default_rng([base, i])) for i in range(count)]
