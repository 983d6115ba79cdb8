"""Joint optimization of the height field and the sonar nuisance parameters.

Each epoch is one minibatch step: a batch of pings is rendered through the
differentiable sidescan model and compared against the recorded waterfalls,
while a batch of altimeter ground points pins the absolute depth.  Both terms
use a softened L1 norm.  The height field is warm-started by fitting a coarse
grid interpolated from the altimeter hits before the joint phase begins.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.interpolate import griddata

from . import renderer
from .geometry import Pose
from .renderer import RenderConfig, bin_slant_range, side_sign
from .surface import BeamPattern, LineGains, Reflectivity, SirenSurface, \
    pretrain_to_grid


@dataclass
class TrainConfig:
    epochs: int = 800
    lr: float = 2e-4
    lr_decay: float = 0.995
    decay_every: int = 2
    batch_pings: int = 200
    batch_heights: int = 800
    pretrain_epochs: int = 10
    pretrain_grid: int = 64
    loss_eps: float = 1e-8
    seed: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_pings < 1 or self.batch_heights < 1:
            raise ValueError("invalid training configuration")
        if self.lr <= 0 or not (0 < self.lr_decay <= 1):
            raise ValueError("invalid learning-rate schedule")


@dataclass
class TrainData:
    """Everything the optimizer needs about one survey pass."""

    poses: list[Pose]
    port: np.ndarray                 # (n_pings, n_bins)
    starboard: np.ndarray
    altimeter_points: np.ndarray     # (N, 3) world ground hits
    line_index: np.ndarray
    slant_range_max: float
    altitudes: np.ndarray            # per-ping height above floor (arc seed)

    def __post_init__(self):
        n = len(self.poses)
        if self.port.shape != self.starboard.shape or self.port.shape[0] != n:
            raise ValueError("waterfall shape does not match the trajectory")
        if len(self.line_index) != n or len(self.altitudes) != n:
            raise ValueError("per-ping arrays must match the trajectory length")

    @property
    def n_bins(self) -> int:
        return self.port.shape[1]

    @staticmethod
    def from_survey(survey, trajectory: list[Pose] | None = None) -> "TrainData":
        """Assemble training data, optionally with an updated trajectory."""
        poses = list(trajectory) if trajectory is not None else list(survey.dr_trajectory)
        ground = np.array([p.apply(np.array([0.0, 0.0, -a]))
                           for p, a in zip(poses, survey.altimeter)])
        return TrainData(poses, survey.port, survey.starboard, ground,
                         survey.line_index, survey.plan.slant_range_max,
                         np.asarray(survey.altimeter, dtype=float))


@dataclass
class TrainModules:
    surface: SirenSurface
    beam: BeamPattern
    reflectivity: Reflectivity
    gains: LineGains

    def parameters(self):
        for m in (self.surface, self.beam, self.reflectivity, self.gains):
            yield from m.parameters()


def build_modules(data: TrainData, cfg: RenderConfig | None = None,
                  n_layers: int = 5, hidden: int = 128) -> TrainModules:
    """Modules sized to the survey footprint, domain set from the data."""
    cfg = cfg or RenderConfig()
    xy = np.array([p.position[:2] for p in data.poses])
    pad = data.slant_range_max
    x_range = (xy[:, 0].min() - pad, xy[:, 0].max() + pad)
    y_range = (xy[:, 1].min() - pad, xy[:, 1].max() + pad)
    z = data.altimeter_points[:, 2] if len(data.altimeter_points) else np.array([0.0])
    half = max(1.0, 3.0 * (z.max() - z.min() + 1.0))
    net = SirenSurface(n_layers=n_layers, hidden=hidden)
    net.set_domain(x_range, y_range, (z.mean() - half, z.mean() + half))
    beam = BeamPattern(*cfg.vertical_opening)
    refl = Reflectivity(x_range, y_range)
    gains = LineGains(int(data.line_index.max()) + 1)
    return TrainModules(net, beam, refl, gains)


def soft_l1(diff: torch.Tensor, eps: float) -> torch.Tensor:
    """Mean softened absolute error sqrt(d^2 + eps^2)."""
    return torch.sqrt(diff * diff + eps * eps).mean()


def height_loss(net: SirenSurface, points: torch.Tensor, eps: float) -> torch.Tensor:
    return soft_l1(net.height(points[:, :2]) - points[:, 2], eps)


def intensity_loss(predicted: torch.Tensor, measured: torch.Tensor,
                   eps: float) -> torch.Tensor:
    return soft_l1(predicted - measured, eps)


class _Pool:
    """Without-replacement index sampler that reshuffles when exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.cursor = 0

    def draw(self, k: int) -> np.ndarray:
        k = min(k, self.n)
        out = []
        while len(out) < k:
            take = min(k - len(out), self.n - self.cursor)
            out.extend(self.order[self.cursor: self.cursor + take])
            self.cursor += take
            if self.cursor == self.n:
                self.order = self.rng.permutation(self.n)
                self.cursor = 0
        return np.array(out, dtype=int)


@dataclass
class TrainReport:
    epochs_run: int
    height_losses: np.ndarray
    intensity_losses: np.ndarray

    @property
    def final_loss(self) -> float:
        if self.epochs_run == 0:
            return float("nan")
        return float(self.height_losses[-1] + self.intensity_losses[-1])


def _altimeter_grid(points: np.ndarray, n_cells: int):
    """Coarse height grid linearly interpolated from scattered ground hits."""
    x0, y0 = points[:, 0].min(), points[:, 1].min()
    span_x = max(points[:, 0].max() - x0, 1.0)
    span_y = max(points[:, 1].max() - y0, 1.0)
    cell = max(span_x, span_y) / (n_cells - 1)
    gx, gy = np.meshgrid(x0 + cell * np.arange(int(span_x / cell) + 1),
                         y0 + cell * np.arange(int(span_y / cell) + 1))
    grid = griddata(points[:, :2], points[:, 2], (gx, gy), method="linear")
    fill = griddata(points[:, :2], points[:, 2], (gx, gy), method="nearest")
    grid = np.where(np.isfinite(grid), grid, fill)
    return grid, float(x0), float(y0), float(cell)


def _ping_batch(data: TrainData, modules: TrainModules, idx: np.ndarray):
    """Flatten (ping, side, bin) into one render batch with targets."""
    n_bins = data.n_bins
    rs1 = torch.as_tensor(bin_slant_range(np.arange(n_bins),
                                          data.slant_range_max, n_bins),
                          dtype=torch.float64)
    pos_l, R_l, rs_l, sign_l, alt_l, gain_idx, target = [], [], [], [], [], [], []
    for i in idx:
        pose = data.poses[i]
        pos = torch.tensor(pose.position, dtype=torch.float64).expand(n_bins, 3)
        R = torch.tensor(pose.rotation, dtype=torch.float64).expand(n_bins, 3, 3)
        for side, row in ((renderer.PORT, data.port[i]),
                          (renderer.STARBOARD, data.starboard[i])):
            pos_l.append(pos)
            R_l.append(R)
            rs_l.append(rs1)
            sign_l.append(torch.full((n_bins,), side_sign(side),
                                     dtype=torch.float64))
            alt_l.append(torch.full((n_bins,), float(data.altitudes[i]),
                                    dtype=torch.float64))
            gain_idx.append(np.full(n_bins, data.line_index[i]))
            target.append(torch.as_tensor(row, dtype=torch.float64))
    gains = modules.gains(torch.as_tensor(np.concatenate(gain_idx)))
    return (torch.cat(pos_l), torch.cat(R_l), torch.cat(rs_l), torch.cat(sign_l),
            torch.cat(alt_l), gains, torch.cat(target))


def train(modules: TrainModules, data: TrainData, cfg: TrainConfig,
          render_cfg: RenderConfig | None = None) -> TrainReport:
    """Run the full optimization; modules are updated in place.

    Raises RuntimeError (with the epoch index) if the loss goes non-finite.
    """
    render_cfg = render_cfg or RenderConfig()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    have_heights = len(data.altimeter_points) > 0
    if have_heights and cfg.pretrain_epochs > 0:
        grid, x0, y0, cell = _altimeter_grid(data.altimeter_points,
                                             cfg.pretrain_grid)
        pretrain_to_grid(modules.surface, grid, x0, y0, cell,
                         epochs=cfg.pretrain_epochs, lr=cfg.lr, seed=cfg.seed)
    elif not have_heights:
        warnings.warn("no altimeter points: depth is unconstrained",
                      stacklevel=2)

    if cfg.epochs == 0:
        return TrainReport(0, np.zeros(0), np.zeros(0))

    opt = torch.optim.Adam(modules.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.decay_every,
                                            gamma=cfg.lr_decay)
    ping_pool = _Pool(len(data.poses), rng)
    height_pool = _Pool(len(data.altimeter_points), rng) if have_heights else None
    heights = torch.as_tensor(data.altimeter_points, dtype=torch.float64) \
        if have_heights else None

    h_hist = np.zeros(cfg.epochs)
    i_hist = np.zeros(cfg.epochs)
    log_rows = []
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        idx = ping_pool.draw(cfg.batch_pings)
        pos, R, rs, sign, alt, gains, target = _ping_batch(data, modules, idx)
        pred = renderer.render_bins_batch(modules.surface, modules.beam,
                                          modules.reflectivity, gains, pos, R,
                                          rs, sign, render_cfg, altitude=alt)
        l_i = intensity_loss(pred, target, cfg.loss_eps)
        if have_heights:
            hsel = heights[height_pool.draw(cfg.batch_heights)]
            l_h = height_loss(modules.surface, hsel, cfg.loss_eps)
        else:
            l_h = torch.zeros((), dtype=torch.float64)
        loss = l_h + l_i
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at epoch {epoch}")
        loss.backward()
        opt.step()
        sched.step()
        h_hist[epoch] = float(l_h.detach())
        i_hist[epoch] = float(l_i.detach())
        if cfg.log_path is not None:
            log_rows.append([epoch, float(l_h.detach()), float(l_i.detach()),
                             opt.param_groups[0]["lr"]])

    if cfg.log_path is not None:
        with open(cfg.log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "height_loss", "intensity_loss", "lr"])
            w.writerows(log_rows)
    return TrainReport(cfg.epochs, h_hist, i_hist)
