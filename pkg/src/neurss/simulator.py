"""Synthetic survey generation: terrain, lawn-mower trajectory, dead-reckoning
corruption, altimeter readings, rendered waterfalls and oracle associations.

The terrain is an analytic height field (base depth plus Gaussian bumps), so
every rendered waterfall has an exact reference surface and gradient.  Noise
enters the dead reckoning through the yaw only: each per-ping yaw increment is
perturbed by zero-mean Gaussian noise with standard deviation
yaw_noise_density * dt, giving a heading random walk with variance
density^2 * t * dt after t seconds.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import renderer
from .geometry import (AssociationEntry, DataAssociation, Landmark, Pose,
                       read_association_csv, read_trajectory_csv,
                       write_association_csv, write_trajectory_csv)
from .renderer import PORT, STARBOARD, RenderConfig

GRID_MAGIC = "NRGD"


@dataclass(frozen=True)
class TerrainFeature:
    """One Gaussian bump: positive amplitude = hill, negative = sinkhole."""
    amplitude: float
    center: tuple[float, float]
    sx: float
    sy: float

    def __post_init__(self):
        if self.sx <= 0 or self.sy <= 0:
            raise ValueError("feature footprint must be positive")


class Terrain:
    """Analytic seafloor height field with exact spatial gradient.

    Implements the same evaluation interface as the learned surface
    (height / height_and_grad on torch tensors) so the renderer can draw
    ground-truth waterfalls from it directly.
    """

    def __init__(self, base_depth: float, features: list[TerrainFeature] | None = None,
                 domain_half_extent: float = 100.0):
        self.base_depth = float(base_depth)
        self.features = list(features or [])
        self.domain_scale = float(domain_half_extent)

    def _terms(self, x, y):
        lib = torch if torch.is_tensor(x) else np
        h = lib.zeros_like(x) + self.base_depth
        gx = lib.zeros_like(x)
        gy = lib.zeros_like(x)
        for f in self.features:
            dx, dy = x - f.center[0], y - f.center[1]
            g = f.amplitude * lib.exp(-0.5 * ((dx / f.sx) ** 2 + (dy / f.sy) ** 2))
            h = h + g
            gx = gx - g * dx / f.sx ** 2
            gy = gy - g * dy / f.sy ** 2
        return h, gx, gy

    def height(self, xy):
        h, _, _ = self._terms(xy[..., 0], xy[..., 1])
        return h

    def height_and_grad(self, xy):
        h, gx, gy = self._terms(xy[..., 0], xy[..., 1])
        stack = torch.stack if torch.is_tensor(h) else np.stack
        return h, stack([gx, gy], -1)

    def height_np(self, x, y):
        h, _, _ = self._terms(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return h

    def curvature_proxy(self, x, y, eps: float = 0.5):
        """Magnitude of the discrete Laplacian; peaks where relief is sharpest."""
        h = self.height_np
        return np.abs(h(x + eps, y) + h(x - eps, y) + h(x, y + eps) + h(x, y - eps)
                      - 4.0 * h(x, y)) / eps ** 2


def terrain_preset(name: str) -> Terrain:
    if name == "flat":
        return Terrain(-20.0)
    if name == "ridge":
        return Terrain(-20.0, [
            TerrainFeature(5.0, (0.0, 15.0), 60.0, 7.0),
            TerrainFeature(3.0, (-40.0, -12.0), 12.0, 10.0),
            TerrainFeature(-2.5, (45.0, -5.0), 10.0, 9.0),
        ])
    if name == "complex":
        return Terrain(-20.0, [
            TerrainFeature(5.0, (-20.0, 18.0), 45.0, 8.0),
            TerrainFeature(4.0, (35.0, -6.0), 12.0, 12.0),
            TerrainFeature(-3.0, (-45.0, -14.0), 10.0, 8.0),
            TerrainFeature(3.0, (10.0, 2.0), 9.0, 14.0),
            TerrainFeature(-2.0, (55.0, 22.0), 11.0, 7.0),
        ])
    raise ValueError(f"unknown terrain preset {name!r}")


@dataclass
class SurveyPlan:
    line_spacing: float = 30.0
    line_length: float = 400.0
    n_lines: int = 10
    speed: float = 2.0
    ping_rate: float = 1.0
    altitude: float = 15.0
    yaw_noise_density: float = 5e-3    # rad/s, see module docstring
    altimeter_noise: float = 0.05      # m
    speckle_sigma: float = 0.1         # multiplicative log-normal
    slant_range_max: float = 45.0
    n_bins: int = 128
    n_landmarks: int = 200
    submap_size: int = 200             # pings per association submap
    seed: int = 0

    def __post_init__(self):
        if self.line_spacing >= 2.0 * self.slant_range_max:
            raise ValueError("no loop-closure opportunities: lines do not overlap")
        if self.speed <= 0 or self.ping_rate <= 0 or self.n_lines < 1:
            raise ValueError("invalid survey plan")


@dataclass
class Survey:
    plan: SurveyPlan
    terrain: Terrain
    gt_trajectory: list[Pose]
    dr_trajectory: list[Pose]
    times: np.ndarray
    line_index: np.ndarray             # per-ping sidescan line id
    altimeter: np.ndarray
    port: np.ndarray                   # (n_pings, n_bins)
    starboard: np.ndarray
    associations: DataAssociation
    landmarks: list[Landmark]

    @property
    def n_pings(self) -> int:
        return len(self.gt_trajectory)

    @property
    def bin_width(self) -> float:
        return self.plan.slant_range_max / self.plan.n_bins

    @property
    def dt(self) -> float:
        return 1.0 / self.plan.ping_rate


def lawnmower_poses(terrain: Terrain, plan: SurveyPlan):
    """Ground-truth poses following the parallel-line plan at fixed altitude."""
    step = plan.speed / plan.ping_rate
    n_per_line = max(2, int(round(plan.line_length / step)))
    poses, times, lines = [], [], []
    t = 0.0
    for k in range(plan.n_lines):
        y = k * plan.line_spacing
        xs = np.arange(n_per_line) * step
        if k % 2 == 1:
            xs = plan.line_length - xs
        yaw = 0.0 if k % 2 == 0 else math.pi
        for x in xs:
            z = float(terrain.height_np(x, y)) + plan.altitude
            poses.append(Pose.from_xyz_rpy(x, y, z, yaw=yaw))
            times.append(t)
            lines.append(k)
            t += 1.0 / plan.ping_rate
    return poses, np.array(times), np.array(lines, dtype=int)


def dead_reckon(gt: list[Pose], dt: float, yaw_noise_density: float,
                rng: np.random.Generator) -> list[Pose]:
    """Corrupt the trajectory by integrating noisy per-ping yaw increments.

    Body-frame step displacements are kept exact; only the heading walks.
    Depth, roll and pitch are absolute measurements and stay untouched.
    """
    sigma = yaw_noise_density * dt
    dr = [gt[0]]
    yaw_err = 0.0
    for prev, cur in zip(gt[:-1], gt[1:]):
        yaw_err += rng.normal(0.0, sigma) if sigma > 0 else 0.0
        d_world = cur.position - prev.position
        c, s = math.cos(yaw_err), math.sin(yaw_err)
        dx = c * d_world[0] - s * d_world[1]
        dy = s * d_world[0] + c * d_world[1]
        p = dr[-1].position
        roll, pitch, yaw = cur.rpy
        dr.append(Pose.from_xyz_rpy(p[0] + dx, p[1] + dy, cur.position[2],
                                    roll, pitch, yaw + yaw_err))
    return dr


def plant_landmarks(terrain: Terrain, plan: SurveyPlan,
                    rng: np.random.Generator) -> list[Landmark]:
    """Drop landmarks preferentially where terrain curvature is largest."""
    margin = 0.3 * plan.slant_range_max
    x = rng.uniform(-margin, plan.line_length + margin, size=8 * plan.n_landmarks)
    y = rng.uniform(-margin, (plan.n_lines - 1) * plan.line_spacing + margin,
                    size=8 * plan.n_landmarks)
    weight = terrain.curvature_proxy(x, y)
    # curvature attracts landmarks, but flat regions keep a baseline share
    weight = weight + max(np.median(weight), 1e-3)
    idx = rng.choice(len(x), size=plan.n_landmarks, replace=False,
                     p=weight / weight.sum())
    out = []
    for i, j in enumerate(idx):
        z = float(terrain.height_np(x[j], y[j]))
        out.append(Landmark(i, np.array([x[j], y[j], z])))
    return out


def project_landmark_to_bin(terrain: Terrain, pose: Pose, landmark: Landmark,
                            plan: SurveyPlan, along_track_tol: float | None = None):
    """Bin index and side of a landmark seen from a pose, or None.

    The landmark must lie within the ping's y-z plane tolerance, inside the
    vertical opening and the slant-range window.
    """
    del terrain  # landmarks already sit on the seafloor
    if along_track_tol is None:
        along_track_tol = 0.75 * plan.speed / plan.ping_rate
    p = pose.inverse().apply(landmark.position)
    r = float(np.linalg.norm(p))
    if r <= 0 or r > plan.slant_range_max or abs(p[0]) > along_track_tol:
        return None
    phi = math.atan2(-p[2], abs(p[1]))
    if not (0.0 <= phi <= 1.5):
        return None
    b = int(round(r / (plan.slant_range_max / plan.n_bins) - 0.5))
    if not 0 <= b < plan.n_bins:
        return None
    return b, (PORT if p[1] >= 0 else STARBOARD)


def build_associations(terrain: Terrain, plan: SurveyPlan, gt: list[Pose],
                       landmarks: list[Landmark]) -> DataAssociation:
    """Oracle data association: submap pairs observing the same landmark.

    For each landmark visible from two different submaps, one entry pairs the
    best (most in-plane) ping of each.  Each (ping, landmark) appears once.
    """
    n = len(gt)
    n_sub = (n + plan.submap_size - 1) // plan.submap_size
    # best observation of each landmark per submap
    best: dict[tuple[int, int], tuple[float, int, int]] = {}
    for i, pose in enumerate(gt):
        sub = i // plan.submap_size
        for lm in landmarks:
            hit = project_landmark_to_bin(terrain, pose, lm, plan)
            if hit is None:
                continue
            b, _side = hit
            off = abs(pose.inverse().apply(lm.position)[0])
            key = (sub, lm.id)
            if key not in best or off < best[key][0]:
                best[key] = (off, i, b)
    entries = []
    used: set[tuple[int, int]] = set()
    for lm in landmarks:
        obs = [(sub, best[(sub, lm.id)]) for sub in range(n_sub)
               if (sub, lm.id) in best]
        for (sa, (_, pa, ba)), (sb, (_, pb, bb)) in zip(obs[:-1], obs[1:]):
            if sa == sb or (pa, lm.id) in used or (pb, lm.id) in used:
                continue
            used.update([(pa, lm.id), (pb, lm.id)])
            entries.append(AssociationEntry(pa, pb, lm.id, ba, bb))
    return DataAssociation(entries)


def render_waterfalls(terrain: Terrain, plan: SurveyPlan, gt: list[Pose],
                      altimeter: np.ndarray, cfg: RenderConfig,
                      rng: np.random.Generator):
    """Extended-Lambertian waterfalls with multiplicative log-normal speckle."""
    n = len(gt)
    port = np.zeros((n, plan.n_bins))
    stbd = np.zeros((n, plan.n_bins))
    for i, pose in enumerate(gt):
        p, s = renderer.render_ping(terrain, None, None, None, pose,
                                    plan.n_bins, plan.slant_range_max, cfg,
                                    altitude=float(altimeter[i]))
        port[i], stbd[i] = p, s
    if plan.speckle_sigma > 0:
        sig = plan.speckle_sigma
        speckle = np.exp(rng.normal(-0.5 * sig * sig, sig, size=(n, 2, plan.n_bins)))
        port *= speckle[:, 0, :]
        stbd *= speckle[:, 1, :]
    return port, stbd


def generate_survey(terrain: Terrain, plan: SurveyPlan,
                    render_cfg: RenderConfig | None = None) -> Survey:
    """Full deterministic synthetic survey for a given seed."""
    cfg = render_cfg or RenderConfig()
    rng = np.random.default_rng(plan.seed)
    gt, times, lines = lawnmower_poses(terrain, plan)
    dt = 1.0 / plan.ping_rate
    dr = dead_reckon(gt, dt, plan.yaw_noise_density, rng)
    true_alt = np.array([pose.position[2] - float(terrain.height_np(
        pose.position[0], pose.position[1])) for pose in gt])
    altimeter = true_alt + rng.normal(0.0, plan.altimeter_noise, size=len(gt))
    port, stbd = render_waterfalls(terrain, plan, gt, true_alt, cfg, rng)
    landmarks = plant_landmarks(terrain, plan, rng)
    assoc = build_associations(terrain, plan, gt, landmarks)
    return Survey(plan=plan, terrain=terrain, gt_trajectory=gt, dr_trajectory=dr,
                  times=times, line_index=lines, altimeter=np.maximum(altimeter, 0.0),
                  port=port, starboard=stbd, associations=assoc, landmarks=landmarks)


# --- heightmap grid format ---------------------------------------------------

def write_grid(path: str | Path, grid: np.ndarray, x0: float, y0: float,
               cell_size: float) -> None:
    """Text header 'NRGD ncols nrows x0 y0 cell_size', then row-major f32."""
    grid = np.asarray(grid)
    ny, nx = grid.shape
    with open(path, "wb") as f:
        f.write(f"{GRID_MAGIC} {nx} {ny} {x0:.6f} {y0:.6f} {cell_size:.6f}\n".encode())
        grid.astype("<f4").tofile(f)


def read_grid(path: str | Path):
    with open(path, "rb") as f:
        header = f.readline().decode().split()
        if header[0] != GRID_MAGIC:
            raise ValueError("not a heightmap grid (bad magic)")
        nx, ny = int(header[1]), int(header[2])
        x0, y0, cell = float(header[3]), float(header[4]), float(header[5])
        grid = np.fromfile(f, dtype="<f4", count=nx * ny).reshape(ny, nx)
    return grid.astype(float), x0, y0, cell


# --- survey directory IO -----------------------------------------------------

def save_survey(survey: Survey, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows_gt = [(i, survey.times[i], p) for i, p in enumerate(survey.gt_trajectory)]
    rows_dr = [(i, survey.times[i], p) for i, p in enumerate(survey.dr_trajectory)]
    write_trajectory_csv(out / "gt.csv", rows_gt)
    write_trajectory_csv(out / "dr.csv", rows_dr)
    with open(out / "altimeter.csv", "w") as f:
        f.write("ping_id,altitude\n")
        for i, a in enumerate(survey.altimeter):
            f.write(f"{i},{a:.6f}\n")
    for line in np.unique(survey.line_index):
        mask = survey.line_index == line
        renderer.write_waterfall(out / f"waterfall_{line:03d}.nrwf",
                                 survey.plan.slant_range_max,
                                 survey.port[mask], survey.starboard[mask])
    write_association_csv(out / "associations.csv", survey.associations)
    with open(out / "landmarks.csv", "w") as f:
        f.write("id,x,y,z\n")
        for lm in survey.landmarks:
            f.write(f"{lm.id},{lm.position[0]:.6f},{lm.position[1]:.6f},"
                    f"{lm.position[2]:.6f}\n")
    # terrain sampled on a regular grid for reference
    margin = 0.5 * survey.plan.slant_range_max
    x0, x1 = -margin, survey.plan.line_length + margin
    y0, y1 = -margin, (survey.plan.n_lines - 1) * survey.plan.line_spacing + margin
    cell = 2.0
    xs = np.arange(x0, x1, cell)
    ys = np.arange(y0, y1, cell)
    X, Y = np.meshgrid(xs, ys)
    write_grid(out / "terrain.grid", survey.terrain.height_np(X, Y), x0, y0, cell)
    meta = {"plan": asdict(survey.plan),
            "terrain": {"base_depth": survey.terrain.base_depth,
                        "features": [asdict(f) for f in survey.terrain.features],
                        "domain_half_extent": survey.terrain.domain_scale},
            "line_index": survey.line_index.tolist()}
    with open(out / "survey.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_survey(in_dir: str | Path) -> Survey:
    src = Path(in_dir)
    with open(src / "survey.json") as f:
        meta = json.load(f)
    plan = SurveyPlan(**meta["plan"])
    terrain = Terrain(meta["terrain"]["base_depth"],
                      [TerrainFeature(**ft) for ft in meta["terrain"]["features"]],
                      meta["terrain"]["domain_half_extent"])
    gt_rows = read_trajectory_csv(src / "gt.csv")
    dr_rows = read_trajectory_csv(src / "dr.csv")
    times = np.array([t for _, t, _ in gt_rows])
    gt = [p for _, _, p in gt_rows]
    dr = [p for _, _, p in dr_rows]
    altimeter = np.loadtxt(src / "altimeter.csv", delimiter=",", skiprows=1)[:, 1]
    line_index = np.array(meta["line_index"], dtype=int)
    port = np.zeros((len(gt), plan.n_bins))
    stbd = np.zeros((len(gt), plan.n_bins))
    for line in np.unique(line_index):
        p, s, _ = renderer.read_waterfall(src / f"waterfall_{line:03d}.nrwf")
        mask = line_index == line
        port[mask], stbd[mask] = p, s
    assoc = read_association_csv(src / "associations.csv")
    landmarks = []
    lm_rows = np.loadtxt(src / "landmarks.csv", delimiter=",", skiprows=1)
    for row in np.atleast_2d(lm_rows):
        landmarks.append(Landmark(int(row[0]), row[1:4].copy()))
    return Survey(plan=plan, terrain=terrain, gt_trajectory=gt, dr_trajectory=dr,
                  times=times, line_index=line_index, altimeter=altimeter,
                  port=port, starboard=stbd, associations=assoc, landmarks=landmarks)
