"""Road centerline geometry and the global <-> centerline-frame pose transform.

The centerline is stored as an arclength-parameterized polyline with a
per-sample tangent heading and curvature.  Poses are mapped between the
global frame and the centerline reference frame (longitudinal position,
signed lateral offset with left positive, relative heading).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Projection is only valid near the road; lidar range is 50 m, keep 2x margin.
PROJECTION_CORRIDOR_M = 100.0
MAX_SAMPLE_SPACING_M = 1.0
# The frame transform is only invertible while |y| * |curvature| stays well
# below 1; reject poses past this fraction.
CURVATURE_OFFSET_LIMIT = 0.5


class GeometryError(ValueError):
    """Base class for geometry failures."""


class InvalidWaypointsError(GeometryError):
    """Waypoint list cannot form a centerline."""


class OutOfCorridorError(GeometryError):
    """Point is too far from every centerline sample to project."""


class OutOfRangeError(GeometryError):
    """Frame pose is outside the domain of the transform."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = theta % TWO_PI
    if w > math.pi:
        w -= TWO_PI
    return w


@dataclass(frozen=True)
class GlobalPose:
    """Planar pose in the global frame."""

    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class FramePose:
    """Pose in the centerline reference frame.

    ``x`` is arclength along the centerline, ``y`` the signed lateral offset
    (left of the centerline positive), ``heading`` the heading relative to
    the local centerline tangent.
    """

    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class RoadSpec:
    """Multi-lane straight-road geometry in the centerline frame."""

    lane_count: int
    lane_width: float
    length: float
    y_bound_left: float = float("nan")
    y_bound_right: float = float("nan")

    def __post_init__(self):
        if math.isnan(self.y_bound_left):
            object.__setattr__(self, "y_bound_left", 0.5 * self.lane_count * self.lane_width)
        if math.isnan(self.y_bound_right):
            object.__setattr__(self, "y_bound_right", -0.5 * self.lane_count * self.lane_width)
        if not self.y_bound_right < 0.0 < self.y_bound_left:
            raise GeometryError("road bounds must straddle the centerline")
        width = self.y_bound_left - self.y_bound_right
        if abs(self.lane_count * self.lane_width - width) > 1e-9:
            raise GeometryError("lane_count * lane_width must equal the drivable width")

    def lane_center(self, lane: int) -> float:
        """Signed y of a lane center; lane 0 is the rightmost lane."""
        if not 0 <= lane < self.lane_count:
            raise GeometryError(f"lane {lane} outside 0..{self.lane_count - 1}")
        return self.y_bound_right + (lane + 0.5) * self.lane_width


class Centerline:
    """Arclength-parameterized polyline with tangent headings and curvature.

    Immutable after construction; all queries are pure functions, so one
    instance can be shared freely across threads.
    """

    def __init__(self, arclength, xs, ys, headings_unwrapped, curvatures):
        self.arclength = np.asarray(arclength, dtype=float)
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self._heading_unwrapped = np.asarray(headings_unwrapped, dtype=float)
        self.curvatures = np.asarray(curvatures, dtype=float)
        self.total_length = float(self.arclength[-1])
        self._spacing = float(self.arclength[1] - self.arclength[0])
        for arr in (self.arclength, self.xs, self.ys, self._heading_unwrapped, self.curvatures):
            arr.setflags(write=False)

    @property
    def headings(self) -> np.ndarray:
        """Per-sample tangent headings wrapped to (-pi, pi]."""
        return np.array([wrap_angle(h) for h in self._heading_unwrapped])

    @property
    def samples(self):
        """Ordered (arclength, x, y, heading, curvature) tuples."""
        return list(zip(self.arclength, self.xs, self.ys, self.headings, self.curvatures))

    def _bracket(self, lam: float):
        lam = min(max(lam, 0.0), self.total_length)
        i = int(np.searchsorted(self.arclength, lam, side="right")) - 1
        i = min(max(i, 0), len(self.arclength) - 2)
        t = (lam - self.arclength[i]) / (self.arclength[i + 1] - self.arclength[i])
        return i, t

    def point_at(self, lam: float):
        i, t = self._bracket(lam)
        return (
            self.xs[i] + t * (self.xs[i + 1] - self.xs[i]),
            self.ys[i] + t * (self.ys[i + 1] - self.ys[i]),
        )

    def heading_at(self, lam: float) -> float:
        i, t = self._bracket(lam)
        h = self._heading_unwrapped[i] + t * (self._heading_unwrapped[i + 1] - self._heading_unwrapped[i])
        return wrap_angle(h)

    def curvature_at(self, lam: float) -> float:
        i, t = self._bracket(lam)
        return self.curvatures[i] + t * (self.curvatures[i + 1] - self.curvatures[i])

    def tangent_at(self, lam: float):
        h = self.heading_at(lam)
        return math.cos(h), math.sin(h)

    def normal_at(self, lam: float):
        h = self.heading_at(lam)
        return -math.sin(h), math.cos(h)


def build_centerline(waypoints, resample_step: float = 0.5) -> Centerline:
    """Build a centerline from global (x, y) waypoints.

    The waypoint polyline is resampled onto a uniform arclength grid with
    spacing at most ``resample_step`` (and never more than 1 m); tangent
    headings come from finite-difference tangents and curvature from the
    arclength derivative of the heading.
    """
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise InvalidWaypointsError("need at least two (x, y) waypoints")
    seglen = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    if np.any(seglen <= 0.0):
        raise InvalidWaypointsError("consecutive waypoints must be distinct")
    if not 0.0 < resample_step <= MAX_SAMPLE_SPACING_M:
        raise InvalidWaypointsError(
            f"resample_step must be in (0, {MAX_SAMPLE_SPACING_M}] m, got {resample_step}"
        )

    lam_raw = np.concatenate(([0.0], np.cumsum(seglen)))
    total = float(lam_raw[-1])
    n = max(2, int(math.ceil(total / resample_step)) + 1)
    lam = np.linspace(0.0, total, n)
    xs = np.interp(lam, lam_raw, pts[:, 0])
    ys = np.interp(lam, lam_raw, pts[:, 1])

    headings = np.empty(n)
    headings[0] = math.atan2(ys[1] - ys[0], xs[1] - xs[0])
    headings[-1] = math.atan2(ys[-1] - ys[-2], xs[-1] - xs[-2])
    for i in range(1, n - 1):
        headings[i] = math.atan2(ys[i + 1] - ys[i - 1], xs[i + 1] - xs[i - 1])
    headings = np.unwrap(headings)
    curvatures = np.gradient(headings, lam)
    return Centerline(lam, xs, ys, headings, curvatures)


def load_centerline_csv(path, resample_step: float = 0.5) -> Centerline:
    """Load waypoints from a two-column (x, y) CSV with a mandatory header row."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidWaypointsError(f"{path}: empty waypoint file") from None
        try:
            float(header[0])
            raise InvalidWaypointsError(f"{path}: header row required")
        except (ValueError, IndexError):
            pass
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise InvalidWaypointsError(f"{path}:{i}: expected two columns")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError as exc:
                raise InvalidWaypointsError(f"{path}:{i}: {exc}") from None
    return build_centerline(rows, resample_step)


def _nearest_sample(point, centerline: Centerline) -> int:
    dx = centerline.xs - point[0]
    dy = centerline.ys - point[1]
    d2 = dx * dx + dy * dy
    i = int(np.argmin(d2))
    if d2[i] > PROJECTION_CORRIDOR_M**2:
        raise OutOfCorridorError(
            f"point {tuple(point)} is {math.sqrt(d2[i]):.1f} m from the centerline"
        )
    return i


def _tangent_residual(point, centerline: Centerline, lam: float) -> float:
    # Zero where the point sits on the interpolated normal at lam.
    cx, cy = centerline.point_at(lam)
    tx, ty = centerline.tangent_at(lam)
    return (point[0] - cx) * tx + (point[1] - cy) * ty


def project(point, centerline: Centerline) -> float:
    """Arclength of the centerline point closest to a global (x, y) point.

    A parabolic fit through the squared distances at the nearest samples
    seeds a bisection that zeroes the tangential residual, which makes the
    projection the exact inverse of the lateral offset used by
    :func:`to_global`.  Ties resolve to the smallest arclength.
    """
    point = (float(point[0]), float(point[1]))
    i = _nearest_sample(point, centerline)
    lam_s = centerline.arclength
    h = centerline._spacing

    if 0 < i < len(lam_s) - 1:
        d2 = [
            (centerline.xs[j] - point[0]) ** 2 + (centerline.ys[j] - point[1]) ** 2
            for j in (i - 1, i, i + 1)
        ]
        denom = d2[0] - 2.0 * d2[1] + d2[2]
        if denom > 1e-12:
            lam0 = lam_s[i] + 0.5 * h * (d2[0] - d2[2]) / denom
            lam0 = min(max(lam0, lam_s[i] - h), lam_s[i] + h)
        else:
            lam0 = lam_s[i]
    else:
        lam0 = lam_s[i]

    # The orthogonal foot lies within one spacing of the parabola estimate
    # (guaranteed by the curvature-offset guard), so the bracket stays local;
    # this also makes equidistant ties resolve to the smallest arclength.
    lo = max(0.0, lam0 - h)
    hi = min(centerline.total_length, lam0 + h)
    g_lo = _tangent_residual(point, centerline, lo)
    g_hi = _tangent_residual(point, centerline, hi)
    if g_lo * g_hi > 0.0:
        # no orthogonal foot in the cell: keep the nearer-residual end
        return lo if abs(g_lo) <= abs(g_hi) else hi
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        g_mid = _tangent_residual(point, centerline, mid)
        if g_lo * g_mid <= 0.0:
            hi, g_hi = mid, g_mid
        else:
            lo, g_lo = mid, g_mid
    return 0.5 * (lo + hi)


def _check_offset(y: float, curvature: float):
    if abs(y) * abs(curvature) >= CURVATURE_OFFSET_LIMIT:
        raise OutOfRangeError(
            f"lateral offset {y:.2f} m too large for local curvature {curvature:.4f} 1/m"
        )


def to_frenet(pose: GlobalPose, centerline: Centerline) -> FramePose:
    """Map a global pose into the centerline reference frame (speed untouched)."""
    lam = project((pose.x, pose.y), centerline)
    cx, cy = centerline.point_at(lam)
    nx, ny = centerline.normal_at(lam)
    y = nx * (pose.x - cx) + ny * (pose.y - cy)
    _check_offset(y, centerline.curvature_at(lam))
    psi = wrap_angle(pose.heading - centerline.heading_at(lam))
    return FramePose(lam, y, psi)


def to_global(pose: FramePose, centerline: Centerline) -> GlobalPose:
    """Map a centerline-frame pose back to the global frame (speed untouched)."""
    if not 0.0 <= pose.x <= centerline.total_length:
        raise OutOfRangeError(
            f"arclength {pose.x:.2f} outside [0, {centerline.total_length:.2f}]"
        )
    _check_offset(pose.y, centerline.curvature_at(pose.x))
    cx, cy = centerline.point_at(pose.x)
    nx, ny = centerline.normal_at(pose.x)
    heading = wrap_angle(pose.heading + centerline.heading_at(pose.x))
    return GlobalPose(cx + pose.y * nx, cy + pose.y * ny, heading)
