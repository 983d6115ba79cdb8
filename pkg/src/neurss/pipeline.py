"""End-to-end bathymetric SLAM: alternate pose-graph estimation and height
field training.

The first pass closes loops with a coarse elevation prior (linear between the
submap centers, or none); the trajectory it produces trains the height field,
which then serves as the elevation prior for the next pass.  Dead-reckoning
edges always come from the raw odometry; every pass re-optimizes the full
graph with the newly gated loop closures.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import renderer
from .geometry import Pose, SonarMeasurement, wrap_angle
from .renderer import RenderConfig, bin_slant_range
from .simulator import Survey, write_grid
from .slam import (ElevationPrior, LoopClosure, PoseGraph, RansacConfig,
                   TwoViewObservation, TwoViewProblem, ransac_relative_pose,
                   relative_planar)
from .trainer import TrainConfig, TrainData, TrainModules, build_modules, train


@dataclass
class PipelineConfig:
    iterations: int = 2
    prior_mode: str = "surface"        # none | linear | surface
    warm_start: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    hidden: int = 128
    n_layers: int = 5
    sigma_range_bins: float = 2.0      # range noise in bin widths
    sigma_bearing: float = 0.2         # m
    sigma_elev_surface: float = 0.3    # m
    sigma_elev_linear: float = 1.0     # m
    dr_sigma_xy: float = 0.01          # m per step

    def __post_init__(self):
        if self.prior_mode not in ("none", "linear", "surface"):
            raise ValueError(f"unknown prior mode {self.prior_mode!r}")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")


@dataclass
class LoopClosureAudit:
    pair: tuple[int, int]
    n_landmarks: int
    accepted: bool
    ratio: float


@dataclass
class PipelineResult:
    trajectories: list[list[Pose]]     # one per iteration, after optimization
    modules: TrainModules | None
    closures: list[list[LoopClosure]]
    audits: list[list[LoopClosureAudit]]
    train_reports: list
    surfaces: list = field(default_factory=list)   # snapshot per training phase


def submap_center(sub: int, submap_size: int, n_pings: int) -> int:
    return min(sub * submap_size + submap_size // 2, n_pings - 1)


def _landmark_side(pose: Pose, toward: np.ndarray) -> str:
    """Which sonar side faces a world point (port carries +y)."""
    local = pose.inverse().apply(toward)
    return renderer.PORT if local[1] >= 0 else renderer.STARBOARD


def _arc_landmark(surface, pose: Pose, r: float, side: str, altitude: float,
                  cfg: RenderConfig) -> np.ndarray:
    """World point where the bin's arc meets the prior floor.

    With a trained surface the arc search is used; otherwise the flat-floor
    elevation angle from the altimeter reading seeds a closed-form point.
    """
    if surface is not None:
        _, _, point = renderer.gd_intersect(surface, pose, r, side, cfg,
                                            altitude=altitude)
        return point
    phi = math.asin(min(max(altitude / r, 0.0), 1.0))
    point, _ = renderer.arc_point(pose, r, phi, side)
    return point


def _pair_key(entry, submap_size: int) -> tuple[int, int]:
    return entry.alpha_ping // submap_size, entry.beta_ping // submap_size


def build_two_view(survey: Survey, trajectory: list[Pose], entries: list,
                   pair: tuple[int, int], surface, cfg: PipelineConfig):
    """Assemble the two-view problem for one submap pair from associations."""
    plan = survey.plan
    n = survey.n_pings
    ca = submap_center(pair[0], plan.submap_size, n)
    cb = submap_center(pair[1], plan.submap_size, n)
    x_a, x_b = trajectory[ca], trajectory[cb]
    sigma_r = cfg.sigma_range_bins * survey.bin_width
    noise = np.diag([sigma_r ** 2, cfg.sigma_bearing ** 2])
    obs_a, obs_b, inits = [], [], []
    for k, e in enumerate(entries):
        lms = []
        for center, ping, b in ((x_a, e.alpha_ping, e.alpha_bin),
                                (x_b, e.beta_ping, e.beta_bin)):
            pose = trajectory[ping]
            r = float(bin_slant_range(b, plan.slant_range_max, plan.n_bins))
            other = x_b if center is x_a else x_a
            side = _landmark_side(pose, other.position)
            point = _arc_landmark(surface, pose, r, side,
                                  float(survey.altimeter[ping]), cfg.render)
            offset = center.inverse().compose(pose)
            meas = SonarMeasurement(r, 0.0, noise)
            (obs_a if center is x_a else obs_b).append(
                TwoViewObservation(k, offset, meas))
            lms.append(point)
        inits.append(np.mean(lms, axis=0))
    # DR drift between the two submap centers
    steps = abs(cb - ca)
    sig_yaw = plan.yaw_noise_density * survey.dt * math.sqrt(max(steps, 1))
    sig_xy = max(0.5, plan.speed * survey.dt * steps * sig_yaw / math.sqrt(3.0))
    sigma_b = np.diag([sig_xy ** 2, sig_xy ** 2, max(sig_yaw, 1e-3) ** 2])
    return TwoViewProblem(x_a, x_b, obs_a, obs_b, np.array(inits), sigma_b), ca, cb


def _elevation_prior(mode: str, surface, problem: TwoViewProblem,
                     survey: Survey, ca: int, cb: int,
                     cfg: PipelineConfig) -> ElevationPrior:
    if mode == "surface" and surface is not None:
        return ElevationPrior.from_surface(surface, sigma=cfg.sigma_elev_surface)
    if mode in ("linear", "surface"):
        anchors = []
        for c, pose in ((ca, problem.x_a), (cb, problem.x_b)):
            anchors.append([pose.position[0], pose.position[1],
                            pose.position[2] - float(survey.altimeter[c])])
        return ElevationPrior.linear(anchors[0], anchors[1],
                                     sigma=cfg.sigma_elev_linear)
    return ElevationPrior.none()


def slam_pass(survey: Survey, trajectory: list[Pose], surface,
              cfg: PipelineConfig, seed: int = 0):
    """One full loop-closure + pose-graph pass; returns (poses, closures, audits)."""
    plan = survey.plan
    by_pair: dict[tuple[int, int], list] = {}
    for e in survey.associations.entries:
        by_pair.setdefault(_pair_key(e, plan.submap_size), []).append(e)

    closures, audits = [], []
    rng = np.random.default_rng(seed)
    for pair in sorted(by_pair):
        entries = by_pair[pair]
        if len(entries) < cfg.ransac.min_landmarks:
            audits.append(LoopClosureAudit(pair, len(entries), False, float("nan")))
            continue
        problem, ca, cb = build_two_view(survey, trajectory, entries, pair,
                                         surface, cfg)
        prior = _elevation_prior(cfg.prior_mode, surface, problem, survey,
                                 ca, cb, cfg)
        lc, diag = ransac_relative_pose(problem, prior, cfg.ransac, ca, cb,
                                        rng=rng)
        audits.append(LoopClosureAudit(pair, len(entries), lc is not None,
                                       float(diag.get("ratio", float("nan")))))
        if lc is not None:
            closures.append(lc)

    graph = PoseGraph(list(trajectory))
    dr = survey.dr_trajectory
    sig_yaw = max(plan.yaw_noise_density * survey.dt, 1e-6)
    dr_cov = np.diag([cfg.dr_sigma_xy ** 2, cfg.dr_sigma_xy ** 2, sig_yaw ** 2])
    for i in range(survey.n_pings - 1):
        graph.add_dr_edge(i, i + 1, relative_planar(dr[i], dr[i + 1]), dr_cov)
    for lc in closures:
        graph.add_lc_edge(lc.index_a, lc.index_b, lc.relative,
                          lc.covariance + 1e-6 * np.eye(3))
    return graph.optimize(), closures, audits


def run(survey: Survey, cfg: PipelineConfig) -> PipelineResult:
    """Alternate SLAM passes and height-field training for cfg.iterations.

    The height field is first fitted on the dead-reckoned trajectory, so even
    the first SLAM pass can use it as elevation prior.  Every pass starts from
    dead reckoning - only the prior improves between iterations.  Starting
    from the previous estimate would break the closure gating, whose
    triangulation-improvement ratio needs the uncorrected initialization as
    its baseline.  The field is refitted on each optimized trajectory.
    """
    # module construction draws initial weights from the global torch RNG
    torch.manual_seed(cfg.train.seed)
    trajectory = list(survey.dr_trajectory)
    data = TrainData.from_survey(survey, trajectory=trajectory)
    modules = build_modules(data, cfg.render, n_layers=cfg.n_layers,
                            hidden=cfg.hidden)
    reports = [train(modules, data, cfg.train, cfg.render)]
    surfaces = [copy.deepcopy(modules.surface)]
    trajectories, all_closures, all_audits = [], [], []
    for it in range(cfg.iterations):
        surface = modules.surface if cfg.prior_mode == "surface" else None
        trajectory, closures, audits = slam_pass(survey,
                                                 list(survey.dr_trajectory),
                                                 surface, cfg,
                                                 seed=cfg.ransac.seed)
        trajectories.append(trajectory)
        all_closures.append(closures)
        all_audits.append(audits)

        data = TrainData.from_survey(survey, trajectory=trajectory)
        if not cfg.warm_start:
            modules = build_modules(data, cfg.render, n_layers=cfg.n_layers,
                                    hidden=cfg.hidden)
        reports.append(train(modules, data, cfg.train, cfg.render))
        surfaces.append(copy.deepcopy(modules.surface))
    return PipelineResult(trajectories, modules, all_closures, all_audits,
                          reports, surfaces)


def sweep_accept_threshold(survey: Survey, trajectory: list[Pose], surface,
                           cfg: PipelineConfig,
                           values=(0.5, 0.6, 0.7, 0.8, 0.9)):
    """RTE vs gating-threshold table: one RANSAC sweep, filtered per value.

    Candidate closures (with their best ratios) are computed once at the
    current threshold=1 (accept everything scoreable), then each tabulated
    threshold keeps its subset, re-optimizes the graph and scores RTE against
    ground truth.  Returns a list of {threshold, n_accepted, rte} rows.
    """
    import dataclasses
    open_cfg = dataclasses.replace(cfg, ransac=dataclasses.replace(
        cfg.ransac, accept_ratio=1.0 + 1e-9))
    _, closures, audits = slam_pass(survey, trajectory, surface, open_cfg,
                                    seed=cfg.ransac.seed)
    plan = survey.plan
    dr = survey.dr_trajectory
    sig_yaw = max(plan.yaw_noise_density * survey.dt, 1e-6)
    dr_cov = np.diag([cfg.dr_sigma_xy ** 2, cfg.dr_sigma_xy ** 2, sig_yaw ** 2])
    rows = []
    for thr in values:
        graph = PoseGraph(list(trajectory))
        for i in range(survey.n_pings - 1):
            graph.add_dr_edge(i, i + 1, relative_planar(dr[i], dr[i + 1]), dr_cov)
        kept = [lc for lc in closures if lc.ratio < thr]
        for lc in kept:
            graph.add_lc_edge(lc.index_a, lc.index_b, lc.relative,
                              lc.covariance + 1e-6 * np.eye(3))
        poses = graph.optimize()
        rows.append({"threshold": float(thr), "n_accepted": len(kept),
                     "rte": compute_rte(poses, survey.gt_trajectory)})
    return rows


# --- evaluation --------------------------------------------------------------

def compute_ate(estimate: list[Pose], reference: list[Pose]) -> float:
    """RMS horizontal position error, no alignment (start pose is shared)."""
    if len(estimate) != len(reference):
        raise ValueError("trajectory length mismatch")
    d = np.array([e.position[:2] - r.position[:2]
                  for e, r in zip(estimate, reference)])
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def compute_rte(estimate: list[Pose], reference: list[Pose],
                window: int = 10) -> float:
    """RMS error of planar relative transforms over a fixed ping window."""
    if len(estimate) != len(reference):
        raise ValueError("trajectory length mismatch")
    errs = []
    for i in range(0, len(estimate) - window):
        de = relative_planar(estimate[i], estimate[i + window])
        dr = relative_planar(reference[i], reference[i + window])
        diff = de - dr
        diff[2] = float(wrap_angle(diff[2]))
        errs.append(diff[:2] @ diff[:2])
    return float(np.sqrt(np.mean(errs)))


def coverage_mask(points_xy: np.ndarray, trajectory: list[Pose],
                  max_range: float) -> np.ndarray:
    """True where a grid point lies within sonar range of some ping."""
    track = np.array([p.position[:2] for p in trajectory])
    dist, _ = cKDTree(track).query(points_xy)
    return dist <= max_range


def compute_bathy_error(surface, terrain, trajectory: list[Pose],
                        max_range: float, cell: float = 2.0):
    """Mean absolute height error over the sonar-covered footprint."""
    track = np.array([p.position[:2] for p in trajectory])
    x = np.arange(track[:, 0].min() - max_range, track[:, 0].max() + max_range, cell)
    y = np.arange(track[:, 1].min() - max_range, track[:, 1].max() + max_range, cell)
    gx, gy = np.meshgrid(x, y)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    mask = coverage_mask(pts, trajectory, max_range)
    with torch.no_grad():
        h = surface.height(torch.as_tensor(pts[mask], dtype=torch.float64)).numpy()
    truth = terrain.height_np(pts[mask, 0], pts[mask, 1])
    return float(np.mean(np.abs(h - truth))), int(mask.sum())


def export_height_grid(path: str | Path, surface, trajectory: list[Pose],
                       max_range: float, cell: float = 2.0) -> None:
    """Sample the trained surface over the survey footprint and write a grid."""
    track = np.array([p.position[:2] for p in trajectory])
    x0 = track[:, 0].min() - max_range
    y0 = track[:, 1].min() - max_range
    x = np.arange(x0, track[:, 0].max() + max_range, cell)
    y = np.arange(y0, track[:, 1].max() + max_range, cell)
    gx, gy = np.meshgrid(x, y)
    pts = torch.as_tensor(np.column_stack([gx.ravel(), gy.ravel()]),
                          dtype=torch.float64)
    with torch.no_grad():
        h = surface.height(pts).numpy().reshape(gy.shape)
    write_grid(path, h, float(x0), float(y0), cell)
