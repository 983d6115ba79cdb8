"""Differentiable forward model of sidescan intensity.

Per bin at slant range r: find the elevation angle where the isotemporal arc
meets the seafloor by a fixed-step gradient descent, then compose squared
cosine Lambertian scattering, a Gaussian nadir volume density, shadow
transmittance integrated backward along the return ray, beam pattern,
reflectivity and per-line gain.

The arc search runs detached; gradients flow only through the surface, beam,
reflectivity and gain evaluations at the found intersection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import Pose

PORT, STARBOARD = "port", "starboard"
WATERFALL_MAGIC = b"NRWF"


def side_sign(side: str) -> float:
    """Lateral sign of the ensonified half-plane: port +y, starboard -y."""
    if side == PORT:
        return 1.0
    if side == STARBOARD:
        return -1.0
    raise ValueError(f"unknown side {side!r}")


@dataclass
class RenderConfig:
    gd_steps: int = 30
    gd_step_size: float = 2.0
    vertical_opening: tuple[float, float] = (0.0, 1.5)
    nadir_spread: float = 0.25          # m^2
    shadow_samples: int = 30
    shadow_back_distance: float = 2.0   # m
    occlusion_sharpness: float = 10.0   # 1/m, peak particle density
    occlusion_steepness: float = 50.0   # 1/m, transition rate of the density
    occlusion_margin: float = 0.2       # m, penetration before density rises

    def __post_init__(self):
        lo, hi = self.vertical_opening
        if not (lo < hi and self.gd_steps >= 0 and self.gd_step_size > 0
                and self.nadir_spread > 0 and self.shadow_samples >= 0
                and self.shadow_back_distance > 0 and self.occlusion_sharpness > 0
                and self.occlusion_steepness > 0 and self.occlusion_margin >= 0):
            raise ValueError("invalid render configuration")


@dataclass(frozen=True)
class BinSample:
    ping_index: int
    bin_index: int
    slant_range: float
    side: str

    def __post_init__(self):
        if self.slant_range <= 0:
            raise ValueError("slant range must be positive")


def bin_slant_range(bin_index, slant_range_max: float, n_bins: int):
    """Center slant range of a bin: (n + 0.5) * r_max / n_bins."""
    return (np.asarray(bin_index, dtype=float) + 0.5) * slant_range_max / n_bins


def _arc_points(pos, R, r_s, sign, phi):
    """World arc point and return-ray vector for batched elevation angles."""
    c, s = torch.cos(phi), torch.sin(phi)
    zeros = torch.zeros_like(phi)
    local = torch.stack([zeros, sign * c, -s], dim=-1)
    disp = torch.einsum("bij,bj->bi", R, local) * r_s.unsqueeze(-1)
    point = pos + disp
    return point, -disp  # ray points from the seafloor back toward the sonar


def arc_point(pose: Pose, r_s: float, phi: float, side: str):
    """Single arc point (world) and its return-ray vector."""
    pos = torch.tensor(pose.position, dtype=torch.float64).unsqueeze(0)
    R = torch.tensor(pose.rotation, dtype=torch.float64).unsqueeze(0)
    p, ray = _arc_points(pos, R, torch.tensor([float(r_s)], dtype=torch.float64),
                         torch.tensor([side_sign(side)], dtype=torch.float64), torch.tensor([float(phi)], dtype=torch.float64))
    return p[0].numpy(), ray[0].numpy()


def initial_elevation(r_s: torch.Tensor, altitude, cfg: RenderConfig) -> torch.Tensor:
    """Arc-search seed: altimeter-implied angle, else opening midpoint."""
    lo, hi = cfg.vertical_opening
    if altitude is None:
        return torch.full_like(r_s, 0.5 * (lo + hi))
    alt = torch.as_tensor(altitude, dtype=torch.float64).expand_as(r_s)
    phi0 = torch.arcsin(torch.clamp(alt / r_s, 0.0, 1.0))
    return torch.clamp(phi0, lo, hi)


def gd_intersect_batch(surface, pos, R, r_s, sign, cfg: RenderConfig, phi0):
    """Fixed-step descent of the squared vertical gap along each arc.

    All tensors are batched; runs detached.  Returns (phi, residual, point).
    """
    lo, hi = cfg.vertical_opening
    scale = float(getattr(surface, "domain_scale", 1.0))
    with torch.no_grad():
        phi = phi0.clone()
        # Refine the altimeter seed by fixed-point iteration on the depth under
        # the current arc point.  Its contraction rate is the terrain slope,
        # independent of elevation angle, so it stays effective for the steep
        # near-nadir arcs where the descent update (whose contraction shrinks
        # with cos^2 phi) is slow to pull in a poor seed.
        for _ in range(5):
            c, s = torch.cos(phi), torch.sin(phi)
            zeros = torch.zeros_like(phi)
            local = torch.stack([zeros, sign * c, -s], dim=-1)
            p = pos + torch.einsum("bij,bj->bi", R, local) * r_s.unsqueeze(-1)
            h = surface.height(p[:, :2])
            ratio = torch.clamp((pos[:, 2] - h) / r_s, -1.0, 1.0)
            phi = torch.clamp(torch.arcsin(ratio), lo, hi)
        for _ in range(cfg.gd_steps):
            c, s = torch.cos(phi), torch.sin(phi)
            zeros = torch.zeros_like(phi)
            local = torch.stack([zeros, sign * c, -s], dim=-1)
            p = pos + torch.einsum("bij,bj->bi", R, local) * r_s.unsqueeze(-1)
            h, g = surface.height_and_grad(p[:, :2])
            delta = h - p[:, 2]
            dlocal = torch.stack([zeros, -sign * s, -c], dim=-1)
            dp = torch.einsum("bij,bj->bi", R, dlocal) * r_s.unsqueeze(-1)
            ddelta = g[:, 0] * dp[:, 0] + g[:, 1] * dp[:, 1] - dp[:, 2]
            phi = phi - cfg.gd_step_size / (r_s * scale) * 2.0 * delta * ddelta
            phi = torch.clamp(phi, lo, hi)
        point, _ = _arc_points(pos, R, r_s, sign, phi)
        residual = surface.height(point[:, :2]) - point[:, 2]
    return phi, residual, point


def gd_intersect(surface, pose: Pose, r_s: float, side: str, cfg: RenderConfig,
                 altitude: float | None = None):
    """Scalar wrapper; returns (phi, residual_m, world point)."""
    pos = torch.tensor(pose.position, dtype=torch.float64).unsqueeze(0)
    R = torch.tensor(pose.rotation, dtype=torch.float64).unsqueeze(0)
    rs = torch.tensor([float(r_s)], dtype=torch.float64)
    sign = torch.tensor([side_sign(side)], dtype=torch.float64)
    phi0 = initial_elevation(rs, altitude, cfg)
    phi, res, point = gd_intersect_batch(surface, pos, R, rs, sign, cfg, phi0)
    return float(phi[0]), float(res[0]), point[0].numpy()


def lambertian_batch(normal_grad, ray):
    """Squared cosine of incidence; both vectors unit-normalized, clamped >= 0."""
    gx, gy = normal_grad
    n = torch.stack([-gx, -gy, torch.ones_like(gx)], dim=-1)
    n = n / n.norm(dim=-1, keepdim=True)
    r = ray / ray.norm(dim=-1, keepdim=True)
    return torch.clamp((r * n).sum(-1), min=0.0) ** 2


def lambertian(surface, point, ray) -> float:
    point = torch.as_tensor(np.asarray(point, dtype=float)).unsqueeze(0)
    ray = torch.as_tensor(np.asarray(ray, dtype=float)).unsqueeze(0)
    with torch.no_grad():
        _, g = surface.height_and_grad(point[:, :2])
        m = lambertian_batch((g[:, 0], g[:, 1]), ray)
    return float(m[0])


def nadir_density(residual, nadir_spread: float):
    """Volume density exp(-residual^2 / spread); 1 at an exact intersection."""
    r = torch.as_tensor(residual, dtype=torch.float64)
    return torch.exp(-r * r / nadir_spread)


def particle_density(clearance, cfg: RenderConfig):
    """Occlusion density: ~sharpness below the surface, ~0 above it.

    clearance is the signed height of a sample above the seafloor; the margin
    keeps grazing, on-surface rays transparent.
    """
    arg = -cfg.occlusion_steepness * (torch.as_tensor(clearance, dtype=torch.float64)
                                      + cfg.occlusion_margin)
    return cfg.occlusion_sharpness * torch.sigmoid(arg)


def transmittance_batch(surface, point, ray, cfg: RenderConfig):
    """Accumulated transmittance backward along the return ray (rectangle rule)."""
    if cfg.shadow_samples == 0:
        return torch.ones(point.shape[0], dtype=torch.float64)
    n = cfg.shadow_samples
    step = cfg.shadow_back_distance / n
    u = torch.arange(1, n + 1, dtype=torch.float64) * step
    rhat = ray / ray.norm(dim=-1, keepdim=True)
    # (B, n, 3) sample points from the intersection toward the sonar
    pts = point.unsqueeze(1) + u.view(1, -1, 1) * rhat.unsqueeze(1)
    flat = pts.reshape(-1, 3)
    h = surface.height(flat[:, :2]).reshape(point.shape[0], n)
    clearance = pts[:, :, 2] - h
    rho = particle_density(clearance, cfg)
    return torch.exp(-rho.sum(dim=1) * step)


def transmittance(surface, pose: Pose, point, ray, cfg: RenderConfig) -> float:
    del pose  # geometry is carried by the ray itself
    point = torch.as_tensor(np.asarray(point, dtype=float)).unsqueeze(0)
    ray = torch.as_tensor(np.asarray(ray, dtype=float)).unsqueeze(0)
    with torch.no_grad():
        t = transmittance_batch(surface, point, ray, cfg)
    return float(t[0])


def render_bins_batch(surface, beam, refl, gain, pos, R, r_s, sign, cfg: RenderConfig,
                      altitude=None):
    """Differentiable intensity for a batch of bins sharing nothing but config.

    gain: scalar tensor or (B,) tensor.  The arc search runs detached; the
    returned intensities carry gradients w.r.t. surface/beam/refl/gain
    parameters with the elevation angle held fixed.
    """
    phi0 = initial_elevation(r_s, altitude, cfg)
    phi, _, _ = gd_intersect_batch(surface, pos, R, r_s, sign, cfg, phi0)
    point, ray = _arc_points(pos, R, r_s, sign, phi)
    h, g = surface.height_and_grad(point[:, :2])
    delta = h - point[:, 2]
    m = lambertian_batch((g[:, 0], g[:, 1]), ray)
    sigma = nadir_density(delta, cfg.nadir_spread)
    t = transmittance_batch(surface, point, ray, cfg)
    intensity = m * sigma * t
    if beam is not None:
        intensity = intensity * beam(phi)
    if refl is not None:
        intensity = intensity * refl(point[:, 0], point[:, 1])
    if gain is not None:
        intensity = intensity * gain
    return intensity


def render_bin(surface, beam, refl, gain, sample: BinSample, pose: Pose,
               cfg: RenderConfig, altitude: float | None = None) -> float:
    pos = torch.tensor(pose.position, dtype=torch.float64).unsqueeze(0)
    R = torch.tensor(pose.rotation, dtype=torch.float64).unsqueeze(0)
    rs = torch.tensor([sample.slant_range], dtype=torch.float64)
    sign = torch.tensor([side_sign(sample.side)], dtype=torch.float64)
    g = None if gain is None else torch.as_tensor(float(gain), dtype=torch.float64)
    with torch.no_grad():
        out = render_bins_batch(surface, beam, refl, g, pos, R, rs, sign, cfg, altitude)
    return float(out[0])


def render_ping(surface, beam, refl, gain, pose: Pose, n_bins: int,
                slant_range_max: float, cfg: RenderConfig,
                altitude: float | None = None):
    """Render both sides of one ping; returns (port, starboard) arrays."""
    rs = torch.as_tensor(bin_slant_range(np.arange(n_bins), slant_range_max, n_bins), dtype=torch.float64)
    pos = torch.tensor(pose.position, dtype=torch.float64).expand(n_bins, 3)
    R = torch.tensor(pose.rotation, dtype=torch.float64).expand(n_bins, 3, 3)
    g = None if gain is None else torch.as_tensor(float(gain), dtype=torch.float64)
    out = []
    with torch.no_grad():
        for side in (PORT, STARBOARD):
            sign = torch.full((n_bins,), side_sign(side), dtype=torch.float64)
            out.append(render_bins_batch(surface, beam, refl, g, pos, R, rs, sign,
                                         cfg, altitude).numpy())
    return out[0], out[1]


# --- waterfall binary IO -----------------------------------------------------

_SIDE_CODES = {PORT: 0, STARBOARD: 1, "both": 2}
_SIDE_NAMES = {v: k for k, v in _SIDE_CODES.items()}


def write_waterfall(path: str | Path, slant_range_max: float,
                    port: np.ndarray | None = None,
                    starboard: np.ndarray | None = None) -> None:
    """Write per-line intensities; side byte 0 port, 1 starboard, 2 both."""
    blocks = [b for b in (port, starboard) if b is not None]
    if not blocks:
        raise ValueError("nothing to write")
    shape = np.asarray(blocks[0]).shape
    if any(np.asarray(b).shape != shape for b in blocks):
        raise ValueError("port/starboard shapes differ")
    side = "both" if len(blocks) == 2 else (PORT if port is not None else STARBOARD)
    with open(path, "wb") as f:
        f.write(WATERFALL_MAGIC)
        f.write(struct.pack("<IIfB", shape[0], shape[1], slant_range_max,
                            _SIDE_CODES[side]))
        for b in blocks:
            np.asarray(b, dtype="<f4").tofile(f)


def read_waterfall(path: str | Path):
    """Returns (port, starboard, slant_range_max); absent sides are None."""
    with open(path, "rb") as f:
        if f.read(4) != WATERFALL_MAGIC:
            raise ValueError("not a waterfall file (bad magic)")
        n_pings, n_bins, r_max, side = struct.unpack("<IIfB", f.read(13))
        count = n_pings * n_bins
        first = np.fromfile(f, dtype="<f4", count=count).reshape(n_pings, n_bins)
        name = _SIDE_NAMES[side]
        if name == "both":
            second = np.fromfile(f, dtype="<f4", count=count).reshape(n_pings, n_bins)
            return first.astype(float), second.astype(float), float(r_max)
        if name == PORT:
            return first.astype(float), None, float(r_max)
        return None, first.astype(float), float(r_max)
