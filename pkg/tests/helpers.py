"""Shared construction helpers for the test suite."""

from __future__ import annotations

import numpy as np

from occgeom.camera import Camera, CameraRig, Intrinsics, Pose


def rotation_from_angles(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def random_pose(rng: np.random.Generator, scale: float = 2.0) -> Pose:
    angles = rng.uniform(-np.pi, np.pi, 3)
    return Pose(
        rotation_from_angles(*angles), rng.uniform(-scale, scale, 3)
    )


def level_camera_mount(yaw: float, offset: np.ndarray) -> Pose:
    """Camera->body pose: optical axis horizontal at `yaw`, image y down."""
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    return Pose(rot, np.asarray(offset, dtype=np.float64))


def simple_rig(n_cameras: int = 2, with_motion: bool = True) -> CameraRig:
    intr = Intrinsics(fx=60.0, fy=60.0, cx=19.5, cy=14.5, width=40, height=30)
    cams = tuple(
        Camera(intr, level_camera_mount(2 * np.pi * k / n_cameras, [0.3, 0.1 * k, 0.0]))
        for k in range(n_cameras)
    )
    if with_motion:
        yaw = 0.04
        rot = rotation_from_angles(yaw)
        ego = {0: Pose.identity(), 1: Pose(rot, np.array([0.8, 0.15, 0.0]))}
    else:
        ego = {0: Pose.identity(), 1: Pose.identity()}
    return CameraRig(cams, ego)
