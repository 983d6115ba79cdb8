"""Implicit seafloor surface and the auxiliary learned radiometric terms.

The surface is a small sinusoidal MLP mapping easting/northing (meters) to
seafloor height (meters, negative below sea level).  Inputs and outputs are
affinely normalized to [-1, 1]; spatial gradients are computed by an explicit
forward-mode chain rule through the sine layers so they stay differentiable
with respect to the network parameters.

Beam pattern and seafloor reflectivity are Gaussian RBF expansions passed
through a softplus (non-negative by construction); per-line gains are free
scalars initialized to 1.
"""

from __future__ import annotations

import math
import struct
import warnings
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_MAGIC = b"NRSS"
CHECKPOINT_VERSION = 1


def _as_xy_tensor(x, y=None) -> torch.Tensor:
    if y is not None:
        x = torch.stack([torch.as_tensor(x, dtype=torch.float64),
                         torch.as_tensor(y, dtype=torch.float64)], dim=-1)
    else:
        x = torch.as_tensor(x, dtype=torch.float64)
    if x.ndim == 1:
        x = x.unsqueeze(0)
    if not torch.isfinite(x).all():
        raise ValueError("non-finite surface query point")
    return x


class SirenSurface(nn.Module):
    """Sinusoidal MLP height field with affine input/output normalization."""

    def __init__(self, n_layers: int = 5, hidden: int = 128, omega0: float = 30.0):
        super().__init__()
        if n_layers < 2:
            raise ValueError("need at least an input and an output layer")
        self.omega0 = omega0
        dims = [2] + [hidden] * (n_layers - 1) + [1]
        self.sine_layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(n_layers - 1))
        self.final = nn.Linear(dims[-2], dims[-1])
        # normalization: world = norm * half + center
        self.register_buffer("in_center", torch.zeros(2, dtype=torch.float64))
        self.register_buffer("in_half", torch.ones(2, dtype=torch.float64))
        self.register_buffer("out_mid", torch.zeros((), dtype=torch.float64))
        self.register_buffer("out_half", torch.ones((), dtype=torch.float64))
        self.double()
        self._init_weights()
        self._clamp_warned = False

    def _init_weights(self):
        with torch.no_grad():
            first = self.sine_layers[0]
            fan = first.weight.shape[1]
            first.weight.uniform_(-1.0 / fan, 1.0 / fan)
            for layer in list(self.sine_layers[1:]) + [self.final]:
                fan = layer.weight.shape[1]
                bound = math.sqrt(6.0 / fan) / self.omega0
                layer.weight.uniform_(-bound, bound)

    def set_domain(self, x_range, y_range, z_range):
        """Fit the affine normalization to the survey bounding box."""
        def half_span(lo, hi):
            return max(0.5 * (hi - lo), 1.0)
        with torch.no_grad():
            self.in_center.copy_(torch.tensor(
                [0.5 * (x_range[0] + x_range[1]), 0.5 * (y_range[0] + y_range[1])],
                dtype=torch.float64))
            self.in_half.copy_(torch.tensor(
                [half_span(*x_range), half_span(*y_range)], dtype=torch.float64))
            self.out_mid.fill_(0.5 * (z_range[0] + z_range[1]))
            self.out_half.fill_(half_span(*z_range))

    @property
    def domain_scale(self) -> float:
        """Meters per normalized input unit (used by arc-descent step sizing)."""
        return float(self.in_half.mean())

    def _normalize(self, xy: torch.Tensor) -> torch.Tensor:
        z = (xy - self.in_center) / self.in_half
        out = torch.abs(z) > 1.0
        if out.any():
            if not self._clamp_warned:
                warnings.warn("surface queried outside its normalized domain; clamping",
                              stacklevel=3)
                self._clamp_warned = True
            z = torch.clamp(z, -1.0, 1.0)
        return z

    def height(self, xy: torch.Tensor) -> torch.Tensor:
        """Seafloor height (meters) at world (x, y); xy shape (B, 2)."""
        z = self._normalize(_as_xy_tensor(xy))
        for layer in self.sine_layers:
            z = torch.sin(self.omega0 * layer(z))
        return self.final(z).squeeze(-1) * self.out_half + self.out_mid

    def height_and_grad(self, xy: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Height and its spatial gradient, both in meters / meters-per-meter.

        The gradient is propagated layer by layer (cosine factors), so the
        returned tensors are differentiable w.r.t. the network parameters.
        """
        xy = _as_xy_tensor(xy)
        z = self._normalize(xy)
        J = torch.zeros(z.shape[0], 2, 2, dtype=z.dtype)
        J[:, 0, 0] = 1.0 / self.in_half[0]
        J[:, 1, 1] = 1.0 / self.in_half[1]
        for layer in self.sine_layers:
            a = layer(z)
            Ja = torch.einsum("hk,bkj->bhj", layer.weight, J)
            z = torch.sin(self.omega0 * a)
            J = (self.omega0 * torch.cos(self.omega0 * a)).unsqueeze(-1) * Ja
        h = self.final(z).squeeze(-1)
        Jh = torch.einsum("ok,bkj->boj", self.final.weight, J).squeeze(1)
        return h * self.out_half + self.out_mid, Jh * self.out_half


def height(net: SirenSurface, x, y):
    """Scalar/array convenience wrapper around ``net.height``."""
    with torch.no_grad():
        h = net.height(_as_xy_tensor(x, y))
    return float(h[0]) if h.numel() == 1 else h.numpy()


def grad_xy(net: SirenSurface, x, y):
    with torch.no_grad():
        _, g = net.height_and_grad(_as_xy_tensor(x, y))
    if g.shape[0] == 1:
        return float(g[0, 0]), float(g[0, 1])
    return g.numpy()


def surface_normal(net: SirenSurface, x, y) -> np.ndarray:
    """Unit upward normal [-gx, -gy, 1]/norm at (x, y)."""
    gx, gy = grad_xy(net, x, y)
    n = np.array([-gx, -gy, 1.0])
    return n / np.linalg.norm(n)


class BeamPattern(nn.Module):
    """Vertical beam response: softplus of a 1-D Gaussian RBF expansion."""

    def __init__(self, phi_min: float, phi_max: float, n_kernels: int = 32):
        super().__init__()
        if not phi_min < phi_max or n_kernels < 1:
            raise ValueError("invalid beam pattern configuration")
        centers = torch.linspace(phi_min, phi_max, n_kernels, dtype=torch.float64)
        spacing = (phi_max - phi_min) / max(n_kernels - 1, 1)
        self.register_buffer("centers", centers)
        self.width = 1.5 * spacing
        self.phi_min, self.phi_max = float(phi_min), float(phi_max)
        self.weights = nn.Parameter(torch.zeros(n_kernels, dtype=torch.float64))

    def forward(self, phi: torch.Tensor) -> torch.Tensor:
        phi = torch.clamp(torch.as_tensor(phi, dtype=torch.float64),
                          self.phi_min, self.phi_max)
        d = phi.unsqueeze(-1) - self.centers
        s = (torch.exp(-d * d / (2.0 * self.width ** 2)) * self.weights).sum(-1)
        return torch.nn.functional.softplus(s)


class Reflectivity(nn.Module):
    """Spatial reflectivity: softplus of a separable 2-D Gaussian RBF grid."""

    def __init__(self, x_range, y_range, n_x: int = 32, n_y: int = 32):
        super().__init__()
        cx = torch.linspace(x_range[0], x_range[1], n_x, dtype=torch.float64)
        cy = torch.linspace(y_range[0], y_range[1], n_y, dtype=torch.float64)
        dx = (x_range[1] - x_range[0]) / max(n_x - 1, 1)
        dy = (y_range[1] - y_range[0]) / max(n_y - 1, 1)
        width = 1.5 * max(dx, dy, 1e-6)
        self.register_buffer("cx", cx)
        self.register_buffer("cy", cy)
        self.width = float(width)
        self.weights = nn.Parameter(torch.zeros(n_y, n_x, dtype=torch.float64))

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=torch.float64)
        y = torch.as_tensor(y, dtype=torch.float64)
        gx = torch.exp(-(x.unsqueeze(-1) - self.cx) ** 2 / (2.0 * self.width ** 2))
        gy = torch.exp(-(y.unsqueeze(-1) - self.cy) ** 2 / (2.0 * self.width ** 2))
        s = torch.einsum("bi,ij,bj->b", gy, self.weights, gx)
        return torch.nn.functional.softplus(s)


class LineGains(nn.Module):
    """One free gain scalar per sidescan line, initialized to 1."""

    def __init__(self, n_lines: int):
        super().__init__()
        self.gains = nn.Parameter(torch.ones(n_lines, dtype=torch.float64))

    def forward(self, line_index: torch.Tensor) -> torch.Tensor:
        return self.gains[line_index]


def eval_beam(bp: BeamPattern, phi) -> float:
    with torch.no_grad():
        v = bp(torch.as_tensor(phi, dtype=torch.float64))
    return float(v) if v.ndim == 0 else v.numpy()


def eval_reflectivity(r: Reflectivity, x, y) -> float:
    with torch.no_grad():
        v = r(torch.atleast_1d(torch.as_tensor(x, dtype=torch.float64)),
              torch.atleast_1d(torch.as_tensor(y, dtype=torch.float64)))
    return float(v[0]) if v.numel() == 1 else v.numpy()


def param_gradients(modules: dict[str, nn.Module],
                    loss_terms) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of the summed loss terms for every parameter.

    Raises on a non-finite term, reporting its index.
    """
    terms = list(loss_terms)
    for i, t in enumerate(terms):
        if not torch.isfinite(t):
            raise ValueError(f"non-finite loss term at index {i}")
    named = [(f"{mname}.{pname}", p)
             for mname, m in modules.items()
             for pname, p in m.named_parameters()]
    params = [p for _, p in named]
    if not terms:
        return {n: torch.zeros_like(p) for n, p in named}
    total = torch.stack(terms).sum()
    grads = torch.autograd.grad(total, params, allow_unused=True, retain_graph=False)
    return {n: (g if g is not None else torch.zeros_like(p))
            for (n, p), g in zip(named, grads)}


def pretrain_to_grid(net: SirenSurface, grid: np.ndarray, x0: float, y0: float,
                     cell_size: float, epochs: int = 10, lr: float = 2e-4,
                     batch: int = 256, seed: int = 0) -> SirenSurface:
    """Fit the network to a heightmap grid for a fixed number of epochs.

    grid is row-major (ny, nx), cell centers at (x0 + j*cell, y0 + i*cell).
    Raises if the epoch loss increases 10 consecutive epochs.
    """
    grid = np.asarray(grid, dtype=float)
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid must be finite")
    ny, nx = grid.shape
    xs = x0 + np.arange(nx) * cell_size
    ys = y0 + np.arange(ny) * cell_size
    X, Y = np.meshgrid(xs, ys)
    pts = torch.tensor(np.stack([X.ravel(), Y.ravel()], axis=1))
    target = torch.tensor(grid.ravel())
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    losses, rising = [], 0
    for _ in range(epochs):
        order = torch.randperm(len(pts), generator=gen)
        epoch_loss = 0.0
        for start in range(0, len(pts), batch):
            idx = order[start:start + batch]
            pred = net.height(pts[idx])
            loss = torch.mean(torch.abs(pred - target[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        epoch_loss /= len(pts)
        if losses and epoch_loss > losses[-1]:
            rising += 1
            if rising >= 10:
                raise RuntimeError("pretraining diverged: loss rose 10 consecutive epochs")
        else:
            rising = 0
        losses.append(epoch_loss)
    return net


# --- checkpoint IO -----------------------------------------------------------

def save_checkpoint(path: str | Path, net: SirenSurface,
                    beam: BeamPattern | None = None,
                    refl: Reflectivity | None = None,
                    gains: LineGains | None = None) -> None:
    """Binary snapshot: magic, version, layer dims, f32 weights, aux blocks."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        layers = list(net.sine_layers) + [net.final]
        f.write(struct.pack("<Id", len(layers), net.omega0))
        for layer in layers:
            out_d, in_d = layer.weight.shape
            f.write(struct.pack("<II", out_d, in_d))
            layer.weight.detach().numpy().astype("<f4").tofile(f)
            layer.bias.detach().numpy().astype("<f4").tofile(f)
        norm = np.concatenate([net.in_center.numpy(), net.in_half.numpy(),
                               [float(net.out_mid), float(net.out_half)]])
        norm.astype("<f4").tofile(f)
        if beam is None:
            f.write(struct.pack("<I", 0))
        else:
            f.write(struct.pack("<I", len(beam.centers)))
            f.write(struct.pack("<ddd", beam.phi_min, beam.phi_max, beam.width))
            beam.weights.detach().numpy().astype("<f4").tofile(f)
        if refl is None:
            f.write(struct.pack("<II", 0, 0))
        else:
            ny, nx = refl.weights.shape
            f.write(struct.pack("<II", nx, ny))
            f.write(struct.pack("<ddddd", float(refl.cx[0]), float(refl.cx[-1]),
                                float(refl.cy[0]), float(refl.cy[-1]), refl.width))
            refl.weights.detach().numpy().astype("<f4").tofile(f)
        if gains is None:
            f.write(struct.pack("<I", 0))
        else:
            f.write(struct.pack("<I", len(gains.gains)))
            gains.gains.detach().numpy().astype("<f4").tofile(f)


def load_checkpoint(path: str | Path):
    """Inverse of :func:`save_checkpoint`; returns (net, beam, refl, gains)."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a surface checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n_layers, omega0 = struct.unpack("<Id", f.read(12))
        dims = []
        weights = []
        for _ in range(n_layers):
            out_d, in_d = struct.unpack("<II", f.read(8))
            W = np.fromfile(f, dtype="<f4", count=out_d * in_d).reshape(out_d, in_d)
            b = np.fromfile(f, dtype="<f4", count=out_d)
            dims.append((out_d, in_d))
            weights.append((W, b))
        net = SirenSurface(n_layers=n_layers, hidden=dims[0][0], omega0=omega0)
        with torch.no_grad():
            layers = list(net.sine_layers) + [net.final]
            for layer, (W, b) in zip(layers, weights):
                layer.weight.copy_(torch.tensor(W, dtype=torch.float64))
                layer.bias.copy_(torch.tensor(b, dtype=torch.float64))
            norm = np.fromfile(f, dtype="<f4", count=6).astype(float)
            net.in_center.copy_(torch.tensor(norm[0:2]))
            net.in_half.copy_(torch.tensor(norm[2:4]))
            net.out_mid.fill_(norm[4])
            net.out_half.fill_(norm[5])
        (nb,) = struct.unpack("<I", f.read(4))
        beam = None
        if nb:
            phi_min, phi_max, width = struct.unpack("<ddd", f.read(24))
            beam = BeamPattern(phi_min, phi_max, nb)
            beam.width = width
            with torch.no_grad():
                beam.weights.copy_(torch.tensor(
                    np.fromfile(f, dtype="<f4", count=nb).astype(float)))
        nx, ny = struct.unpack("<II", f.read(8))
        refl = None
        if nx and ny:
            xa, xb, ya, yb, width = struct.unpack("<ddddd", f.read(40))
            refl = Reflectivity((xa, xb), (ya, yb), nx, ny)
            refl.width = width
            with torch.no_grad():
                refl.weights.copy_(torch.tensor(
                    np.fromfile(f, dtype="<f4", count=nx * ny).astype(float).reshape(ny, nx)))
        (ng,) = struct.unpack("<I", f.read(4))
        gains = None
        if ng:
            gains = LineGains(ng)
            with torch.no_grad():
                gains.gains.copy_(torch.tensor(
                    np.fromfile(f, dtype="<f4", count=ng).astype(float)))
    return net, beam, refl, gains
