"""Keypoint poses, joint heat maps and the 10-part rigid body decomposition.

Coordinates are pixels with the origin at the top-left corner. Pixel (i, j)
(row i, column j) sits at continuous position (x=j, y=i); there is no half-pixel
offset.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError

NUM_JOINTS = 18

# COCO-18 order, as produced by the OpenPose body estimator.
JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
J = {name: i for i, name in enumerate(JOINT_NAMES)}

HEAD_JOINTS = (J["nose"], J["neck"], J["r_eye"], J["l_eye"], J["r_ear"], J["l_ear"])
# Quad whose two diagonals set the limb width: l_shoulder -> r_hip, r_shoulder -> l_hip.
TORSO_JOINTS = (J["l_shoulder"], J["r_shoulder"], J["r_hip"], J["l_hip"])


class Part(IntEnum):
    HEAD = 0
    TORSO = 1
    R_UPPER_ARM = 2
    R_LOWER_ARM = 3
    L_UPPER_ARM = 4
    L_LOWER_ARM = 5
    R_UPPER_LEG = 6
    R_LOWER_LEG = 7
    L_UPPER_LEG = 8
    L_LOWER_LEG = 9


NUM_PARTS = len(Part)

LIMB_JOINTS = {
    Part.R_UPPER_ARM: (J["r_shoulder"], J["r_elbow"]),
    Part.R_LOWER_ARM: (J["r_elbow"], J["r_wrist"]),
    Part.L_UPPER_ARM: (J["l_shoulder"], J["l_elbow"]),
    Part.L_LOWER_ARM: (J["l_elbow"], J["l_wrist"]),
    Part.R_UPPER_LEG: (J["r_hip"], J["r_knee"]),
    Part.R_LOWER_LEG: (J["r_knee"], J["r_ankle"]),
    Part.L_UPPER_LEG: (J["l_hip"], J["l_knee"]),
    Part.L_LOWER_LEG: (J["l_knee"], J["l_ankle"]),
}

TWIN = {
    Part.R_UPPER_ARM: Part.L_UPPER_ARM,
    Part.R_LOWER_ARM: Part.L_LOWER_ARM,
    Part.R_UPPER_LEG: Part.L_UPPER_LEG,
    Part.R_LOWER_LEG: Part.L_LOWER_LEG,
}
TWIN.update({v: k for k, v in list(TWIN.items())})


class Keypoint(NamedTuple):
    x: float
    y: float
    visible: bool


@dataclass(frozen=True, eq=False)
class Pose:
    """18 joints as an (18, 2) array of (x, y) plus an (18,) visibility mask."""

    xy: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        xy = np.array(self.xy, dtype=np.float64)
        vis = np.array(self.visible, dtype=bool)
        if xy.shape != (NUM_JOINTS, 2) or vis.shape != (NUM_JOINTS,):
            raise InvalidArgumentError(
                f"expected {NUM_JOINTS} joints, got xy{xy.shape} visible{vis.shape}"
            )
        xy.flags.writeable = False
        vis.flags.writeable = False
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "visible", vis)

    @classmethod
    def from_keypoints(cls, joints: Sequence[Keypoint | tuple]) -> "Pose":
        if len(joints) != NUM_JOINTS:
            raise InvalidArgumentError(f"expected {NUM_JOINTS} joints, got {len(joints)}")
        xy = [(float(k[0]), float(k[1])) for k in joints]
        vis = [bool(k[2]) for k in joints]
        return cls(np.array(xy), np.array(vis))

    @property
    def joints(self) -> list[Keypoint]:
        return [Keypoint(float(x), float(y), bool(v)) for (x, y), v in zip(self.xy, self.visible)]

    def translated(self, dx: float, dy: float) -> "Pose":
        return Pose(self.xy + np.array([dx, dy]), self.visible)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.visible, other.visible)
                    and np.array_equal(self.xy[self.visible], other.xy[other.visible]))


@dataclass(frozen=True, eq=False)
class HeatMapStack:
    maps: np.ndarray  # (18, height, width)
    sigma: float

    def channels_last(self) -> np.ndarray:
        return np.ascontiguousarray(self.maps.transpose(1, 2, 0))


def heatmap_from_pose(pose: Pose, width: int, height: int, sigma: float = 6.0,
                      squared: bool = False) -> HeatMapStack:
    """Render one map per joint: exp(-||p - p_j|| / sigma^2).

    The exponent uses the plain Euclidean distance unless ``squared`` is set,
    in which case the usual Gaussian exp(-||p - p_j||^2 / sigma^2) is used.
    Maps of invisible joints are zero.
    """
    if width < 1 or height < 1:
        raise InvalidArgumentError(f"image size must be positive, got {width}x{height}")
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    maps = np.zeros((NUM_JOINTS, height, width))
    for j in np.flatnonzero(pose.visible):
        x, y = pose.xy[j]
        d2 = (xs - x) ** 2 + (ys - y) ** 2
        maps[j] = np.exp(-(d2 if squared else np.sqrt(d2)) / sigma ** 2)
    return HeatMapStack(maps, float(sigma))


@dataclass(frozen=True, eq=False)
class BodyRegion:
    part: Part
    corners: Optional[np.ndarray] = None  # (4, 2), consecutive corners

    @property
    def empty(self) -> bool:
        return self.corners is None

    def __post_init__(self):
        if self.corners is not None:
            c = np.array(self.corners, dtype=np.float64)
            if c.shape != (4, 2):
                raise InvalidArgumentError(f"a region needs 4 corners, got shape {c.shape}")
            c.flags.writeable = False
            object.__setattr__(self, "corners", c)
        object.__setattr__(self, "part", Part(self.part))


class RegionSet(tuple):
    """Ten BodyRegion entries indexed by Part."""

    def __new__(cls, regions: Sequence[BodyRegion]):
        regions = tuple(regions)
        if len(regions) != NUM_PARTS or any(r.part != h for h, r in enumerate(regions)):
            raise InvalidArgumentError("a RegionSet holds exactly one region per part, in Part order")
        return super().__new__(cls, regions)


@dataclass(frozen=True, eq=False)
class RegionMask:
    values: np.ndarray  # (height, width) uint8 in {0, 1}
    part: Part

    @property
    def shape(self):
        return self.values.shape


def _limb_half_width(pose: Pose, width: int, height: int) -> float:
    if pose.visible[list(TORSO_JOINTS)].all():
        ls, rs, rh, lh = (pose.xy[j] for j in TORSO_JOINTS)
        mean_diag = 0.5 * (np.hypot(*(ls - rh)) + np.hypot(*(rs - lh)))
        minor = mean_diag / 3.0
    else:
        minor = np.hypot(width, height) / 6.0
    return 0.5 * minor


def limb_rectangle(p1, p2, half_width: float) -> Optional[np.ndarray]:
    """Rectangle whose major axis joins p1 and p2; None if the joints coincide."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    d = p2 - p1
    length = np.hypot(*d)
    if length == 0.0:
        return None
    n = np.array([-d[1], d[0]]) / length * half_width
    return np.stack([p1 - n, p2 - n, p2 + n, p1 + n])


def decompose_regions(pose: Pose, width: int, height: int) -> RegionSet:
    regions = [BodyRegion(h) for h in Part]

    head = [j for j in HEAD_JOINTS if pose.visible[j]]
    if len(head) >= 2:
        pts = pose.xy[head]
        (x0, y0), (x1, y1) = pts.min(axis=0), pts.max(axis=0)
        regions[Part.HEAD] = BodyRegion(Part.HEAD, [(x0, y0), (x1, y0), (x1, y1), (x0, y1)])

    if pose.visible[list(TORSO_JOINTS)].all():
        w, h = width - 1, height - 1
        regions[Part.TORSO] = BodyRegion(Part.TORSO, [(0, 0), (w, 0), (w, h), (0, h)])

    half = _limb_half_width(pose, width, height)
    for part, (a, b) in LIMB_JOINTS.items():
        if pose.visible[a] and pose.visible[b]:
            rect = limb_rectangle(pose.xy[a], pose.xy[b], half)
            if rect is not None:
                regions[part] = BodyRegion(part, rect)
    return RegionSet(regions)


def region_mask(region: BodyRegion, width: int, height: int) -> RegionMask:
    """Binary mask of pixel centres inside the rectangle, boundary included."""
    values = np.zeros((height, width), dtype=np.uint8)
    if region.empty:
        return RegionMask(values, region.part)
    c0, c1, _, c3 = region.corners
    e1, e2 = c1 - c0, c3 - c0
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = xs - c0[0], ys - c0[1]
    u = dx * e1[0] + dy * e1[1]
    v = dx * e2[0] + dy * e2[1]
    inside = (u >= 0) & (u <= e1 @ e1) & (v >= 0) & (v <= e2 @ e2)
    values[inside] = 1
    return RegionMask(values, region.part)


def apply_symmetry_fallback(regions_a: RegionSet, regions_b: RegionSet) -> RegionSet:
    """Fill empty limbs of ``regions_a`` from their mirror limb.

    A substitution happens only when the mirror limb exists in ``regions_a``
    and the limb itself exists in ``regions_b``; otherwise the transform could
    not be fitted anyway. Substitutions read the original set, so the result
    does not depend on limb order.
    """
    out = list(regions_a)
    for part, twin in TWIN.items():
        if regions_a[part].empty and not regions_a[twin].empty and not regions_b[part].empty:
            out[part] = BodyRegion(part, regions_a[twin].corners)
    return RegionSet(out)


def scale_mask(mask: RegionMask, new_width: int, new_height: int) -> RegionMask:
    """Nearest-neighbour resample: target pixel (i, j) reads source (i*H//h, j*W//w)."""
    if new_width < 1 or new_height < 1:
        raise InvalidArgumentError(f"target size must be positive, got {new_width}x{new_height}")
    h, w = mask.values.shape
    rows = np.minimum(np.arange(new_height) * h // new_height, h - 1)
    cols = np.minimum(np.arange(new_width) * w // new_width, w - 1)
    return RegionMask(mask.values[np.ix_(rows, cols)].copy(), mask.part)
