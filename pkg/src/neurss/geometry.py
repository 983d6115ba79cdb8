"""Rigid-body poses, frame chains and the sidescan range/bearing measurement.

World frame is ENU (x east, y north, z up).  The sensor frame is
forward(x) / lateral(y) / down-compatible: port returns lie at +y,
starboard at -y, and the seafloor below the sensor has negative z.
Rotations use the ZYX (yaw-pitch-roll) Euler convention common in marine
robotics; internally every orientation is a proper rotation matrix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """ZYX composition: R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_rpy(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`rpy_to_matrix` (pitch taken in (-pi/2, pi/2))."""
    pitch = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.arctan2(np.sin(a), np.cos(a))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_world = R @ p_local + position."""

    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        if self.position.shape != (3,):
            raise ValueError("position must be a 3-vector")
        R = self.rotation
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.all(np.isfinite(self.position)) or not np.all(np.isfinite(R)):
            raise ValueError("non-finite pose")
        if abs(np.linalg.det(R) - 1.0) > 1e-6 or np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not a proper rotation matrix")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.eye(3))

    @staticmethod
    def from_xyz_rpy(x, y, z, roll=0.0, pitch=0.0, yaw=0.0) -> "Pose":
        return Pose(np.array([x, y, z], dtype=float), rpy_to_matrix(roll, pitch, yaw))

    @property
    def rpy(self) -> tuple[float, float, float]:
        return matrix_to_rpy(self.rotation)

    @property
    def yaw(self) -> float:
        return self.rpy[2]

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.position + self.rotation @ other.position,
                    self.rotation @ other.rotation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(-Rt @ self.position, Rt)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.position

    def relative_to(self, other: "Pose") -> "Pose":
        """Transform of self expressed in the frame of `other`."""
        return other.inverse().compose(self)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if not np.all(np.isfinite(self.position)):
            raise ValueError("landmark coordinates must be finite")


@dataclass(frozen=True)
class SonarMeasurement:
    """Slant range plus the in-plane (zero-bearing) constraint of one return."""

    slant_range: float
    bearing_residual: float
    noise_cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "noise_cov", np.asarray(self.noise_cov, dtype=float))
        C = self.noise_cov
        if self.slant_range <= 0:
            raise ValueError("slant range must be positive")
        if C.shape != (2, 2) or np.abs(C - C.T).max() > 1e-12 or np.any(np.linalg.eigvalsh(C) <= 0):
            raise ValueError("noise_cov must be symmetric positive definite")


@dataclass
class Ping:
    """One sonar transmit: pose at ping time plus both intensity vectors."""

    index: int
    pose: Pose
    port_bins: np.ndarray
    starboard_bins: np.ndarray
    slant_range_max: float
    altimeter: float | None = None

    def __post_init__(self):
        self.port_bins = np.asarray(self.port_bins, dtype=float)
        self.starboard_bins = np.asarray(self.starboard_bins, dtype=float)
        if np.any(self.port_bins < 0) or np.any(self.starboard_bins < 0):
            raise ValueError("intensities must be non-negative")
        if self.altimeter is not None and self.altimeter < 0:
            raise ValueError("altimeter must be non-negative")

    @property
    def n_bins(self) -> int:
        return len(self.port_bins)


@dataclass(frozen=True)
class Submap:
    first: int
    last: int
    center_index: int

    def __post_init__(self):
        if not self.first <= self.center_index <= self.last:
            raise ValueError("center index outside ping range")


@dataclass
class AssociationEntry:
    alpha_ping: int
    beta_ping: int
    landmark_id: int
    alpha_bin: int
    beta_bin: int

    def __post_init__(self):
        if self.alpha_ping == self.beta_ping:
            raise ValueError("association must pair two distinct pings")


@dataclass
class DataAssociation:
    entries: list[AssociationEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            for key in ((e.alpha_ping, e.landmark_id), (e.beta_ping, e.landmark_id)):
                if key in seen:
                    raise ValueError(f"duplicate observation {key}")
                seen.add(key)

    def __len__(self) -> int:
        return len(self.entries)


def world_to_sensor(landmark: np.ndarray, ping_pose: Pose, center_pose: Pose,
                    sensor_offset: Pose) -> np.ndarray:
    """Map a world landmark into the sensor frame of the chained pose.

    The sensor's world pose is ping_pose o center_pose o sensor_offset; the
    landmark is expressed in that frame.
    """
    sensor = ping_pose.compose(center_pose).compose(sensor_offset)
    return sensor.inverse().apply(landmark)


def measure(landmark_sensor: np.ndarray) -> tuple[float, float]:
    """Slant range and along-track (bearing) residual of a sensor-frame point."""
    p = np.asarray(landmark_sensor, dtype=float)
    r = float(np.linalg.norm(p))
    if r == 0.0:
        raise ValueError("degenerate landmark at sensor origin")
    return r, float(p[0])


# --- trajectory / association CSV -------------------------------------------

TRAJECTORY_COLUMNS = ["ping_id", "time_s", "x", "y", "z", "roll", "pitch", "yaw"]


def write_trajectory_csv(path: str | Path, rows) -> None:
    """rows: iterable of (ping_id, time_s, Pose)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAJECTORY_COLUMNS)
        for ping_id, t, pose in rows:
            roll, pitch, yaw = pose.rpy
            w.writerow([ping_id, f"{t:.6f}",
                        f"{pose.position[0]:.9f}", f"{pose.position[1]:.9f}",
                        f"{pose.position[2]:.9f}",
                        f"{roll:.12f}", f"{pitch:.12f}", f"{yaw:.12f}"])


def read_trajectory_csv(path: str | Path) -> list[tuple[int, float, Pose]]:
    out = []
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        for row in r:
            pose = Pose.from_xyz_rpy(float(row["x"]), float(row["y"]), float(row["z"]),
                                     float(row["roll"]), float(row["pitch"]), float(row["yaw"]))
            out.append((int(row["ping_id"]), float(row["time_s"]), pose))
    return out


ASSOCIATION_COLUMNS = ["alpha_ping", "beta_ping", "landmark_id", "alpha_bin", "beta_bin"]


def write_association_csv(path: str | Path, assoc: DataAssociation) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ASSOCIATION_COLUMNS)
        for e in assoc.entries:
            w.writerow([e.alpha_ping, e.beta_ping, e.landmark_id, e.alpha_bin, e.beta_bin])


def read_association_csv(path: str | Path) -> DataAssociation:
    entries = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            entries.append(AssociationEntry(int(row["alpha_ping"]), int(row["beta_ping"]),
                                            int(row["landmark_id"]),
                                            int(row["alpha_bin"]), int(row["beta_bin"])))
    return DataAssociation(entries)
