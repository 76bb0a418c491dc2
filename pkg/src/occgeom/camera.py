"""Pinhole camera rig: projection, unprojection, rays, relative poses.

Conventions, fixed once and used everywhere:
  * camera frame: x right, y down, z forward; depth is the camera-frame z.
  * pixel coordinates: u along columns (x), v along rows (y); pixel centers
    at integer coordinates.
  * Camera.pose maps camera coordinates into the rig anchor frame (the ego
    body); with an identity ego pose that anchor IS the world frame.
  * CameraRig.ego_poses[t] maps ego coordinates at timestamp t into world
    coordinates. Ego motion between t and t' therefore acts on points as
    ego_poses[t']^-1 . ego_poses[t].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import as_tensor

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics for the same lens resampled to width x height.

        Uses the half-pixel-aware mapping so pixel centers stay aligned
        between resolutions.
        """
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = as_tensor(self.rotation)
        t = as_tensor(self.translation).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one 3-vector or an [... x 3] stack of points."""
        p = as_tensor(points)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


class Camera(NamedTuple):
    intrinsics: Intrinsics
    pose: Pose  # camera -> rig anchor


@dataclass(frozen=True)
class CameraRig:
    """A set of rigidly mounted cameras plus a timestamped ego trajectory."""

    cameras: tuple[Camera, ...]
    ego_poses: dict[int, Pose]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(Camera(*c) for c in self.cameras))
        if len(self.cameras) < 1:
            raise ValueError("rig needs at least one camera")
        ts = list(self.ego_poses.keys())
        if any(not isinstance(t, int) for t in ts):
            raise ValueError("ego pose timestamps must be integers")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"timestamps must be strictly increasing, got {ts}")

    def timestamps(self) -> list[int]:
        return list(self.ego_poses.keys())


def camera_pose_at(rig: CameraRig, cam: int, timestamp: int) -> Pose:
    """World pose (camera -> world) of camera `cam` at `timestamp`."""
    if not 0 <= cam < len(rig.cameras):
        raise IndexError(f"camera index {cam} out of range for rig of {len(rig.cameras)}")
    if timestamp not in rig.ego_poses:
        raise KeyError(f"timestamp {timestamp} not in rig ({rig.timestamps()})")
    return rig.ego_poses[timestamp].compose(rig.cameras[cam].pose)


def project_points(
    intr: Intrinsics, pose: Pose, points_world: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pinhole projection of [N x 3] world points.

    Returns (uv [N x 2], depth [N], visible [N]). Points with camera-frame
    z <= 1e-9 are marked invisible and get a finite placeholder uv of (0, 0);
    visibility additionally requires uv inside the sampleable image region.
    """
    p = as_tensor(points_world).reshape(-1, 3)
    cam_pts = pose.inverse().apply(p)
    z = cam_pts[:, 2]
    front = z > 1e-9
    zsafe = np.where(front, z, 1.0)
    u = intr.fx * cam_pts[:, 0] / zsafe + intr.cx
    v = intr.fy * cam_pts[:, 1] / zsafe + intr.cy
    uv = np.stack([np.where(front, u, 0.0), np.where(front, v, 0.0)], axis=1)
    visible = (
        front
        & (uv[:, 0] >= 0.0)
        & (uv[:, 0] <= intr.width - 1.0)
        & (uv[:, 1] >= 0.0)
        & (uv[:, 1] <= intr.height - 1.0)
    )
    return uv, z, visible


def project(cam: Camera, point_world) -> tuple[np.ndarray, float, bool]:
    """Project a single world point; see project_points."""
    intr, pose = cam
    uv, z, vis = project_points(intr, pose, as_tensor(point_world).reshape(1, 3))
    return uv[0], float(z[0]), bool(vis[0])


def unproject(cam: Camera, uv, depth: float) -> np.ndarray:
    """Inverse of project: the world point at pixel uv with camera-frame depth."""
    if depth <= 0:
        raise ValueError(f"unproject needs depth > 0, got {depth}")
    intr, pose = cam
    u, v = float(uv[0]), float(uv[1])
    p_cam = np.array(
        [(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth]
    )
    return pose.apply(p_cam)


def pixel_directions(intr: Intrinsics, pose: Pose, uvs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-frame ray directions for [N x 2] pixel coords, plus the
    camera-frame direction norms |h| (needed to convert z-depth to ray length)."""
    uvs = as_tensor(uvs).reshape(-1, 2)
    h = np.stack(
        [
            (uvs[:, 0] - intr.cx) / intr.fx,
            (uvs[:, 1] - intr.cy) / intr.fy,
            np.ones(uvs.shape[0]),
        ],
        axis=1,
    )
    norms = np.linalg.norm(h, axis=1)
    d_world = (h / norms[:, None]) @ pose.rotation.T
    return d_world, norms


def ray(cam: Camera, uv) -> tuple[np.ndarray, np.ndarray]:
    """Ray through pixel uv: (origin_world, unit direction_world)."""
    intr, pose = cam
    d, _ = pixel_directions(intr, pose, as_tensor(uv).reshape(1, 2))
    return pose.translation.copy(), d[0]


def relative_pose(
    kind: str, rig: CameraRig, i: int, j: int, t: int, t2: int
) -> Pose:
    """Composite transform mapping camera-i coordinates at time t into
    camera-j coordinates at time t2.

    kind selects which motion components participate:
      temporal          same camera across time (requires j == i)
      spatial           adjacent cameras at one time (requires t2 == t)
      spatial_temporal  adjacent cameras across time
    The ego motion is conjugated into the camera frame by the mountings, so
    spatial_temporal equals spatial composed with temporal exactly.
    """
    for c in (i, j):
        if not 0 <= c < len(rig.cameras):
            raise IndexError(f"camera index {c} out of range for rig of {len(rig.cameras)}")
    for ts in (t, t2):
        if ts not in rig.ego_poses:
            raise KeyError(f"timestamp {ts} not in rig ({rig.timestamps()})")
    mount_i = rig.cameras[i].pose
    mount_j = rig.cameras[j].pose
    ego_motion = rig.ego_poses[t2].inverse().compose(rig.ego_poses[t])
    if kind == "temporal":
        if j != i:
            raise ValueError(f"temporal context requires j == i, got i={i} j={j}")
        return mount_i.inverse().compose(ego_motion).compose(mount_i)
    if kind == "spatial":
        if t2 != t:
            raise ValueError(f"spatial context requires t2 == t, got t={t} t2={t2}")
        return mount_j.inverse().compose(mount_i)
    if kind == "spatial_temporal":
        return mount_j.inverse().compose(ego_motion).compose(mount_i)
    raise ValueError(f"unknown relative pose kind {kind!r}")


def _pose_to_json(pose: Pose) -> dict:
    return {
        "rotation": [float(x) for x in pose.rotation.ravel()],
        "translation": [float(x) for x in pose.translation],
    }


def _pose_from_json(d: dict) -> Pose:
    return Pose(np.array(d["rotation"]).reshape(3, 3), np.array(d["translation"]))


def rig_to_json(rig: CameraRig) -> dict:
    """Explicit-field JSON form of a rig (rotations row-major, 9 floats)."""
    return {
        "cameras": [
            {
                "fx": c.intrinsics.fx,
                "fy": c.intrinsics.fy,
                "cx": c.intrinsics.cx,
                "cy": c.intrinsics.cy,
                "width": c.intrinsics.width,
                "height": c.intrinsics.height,
                **_pose_to_json(c.pose),
            }
            for c in rig.cameras
        ],
        "ego_poses": [
            {"timestamp": int(t), **_pose_to_json(p)} for t, p in rig.ego_poses.items()
        ],
    }


def rig_from_json(d: dict) -> CameraRig:
    cams = tuple(
        Camera(
            Intrinsics(
                fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                width=int(c["width"]), height=int(c["height"]),
            ),
            _pose_from_json(c),
        )
        for c in d["cameras"]
    )
    ego = {int(e["timestamp"]): _pose_from_json(e) for e in d["ego_poses"]}
    return CameraRig(cams, ego)


def save_rig(rig: CameraRig, path) -> None:
    with open(path, "w") as f:
        json.dump(rig_to_json(rig), f, indent=2, sort_keys=True)


def load_rig(path) -> CameraRig:
    with open(path) as f:
        return rig_from_json(json.load(f))
