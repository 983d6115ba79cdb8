"""Submap two-view optimization with an elevation prior, RANSAC gating and
the pose-graph back-end.

Depth, roll and pitch are absolute measurements, so the optimized degrees of
freedom are (x, y, yaw) throughout: the two-view problem adjusts the second
submap center and the landmarks, the pose graph adjusts every ping pose.
Landmarks are marginalized out of the loop-closure covariance via the Schur
complement.  All residual Jacobians are analytic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch

from .geometry import Pose, SonarMeasurement, rot_z, rpy_to_matrix, wrap_angle


def _d_rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


# --- elevation prior ---------------------------------------------------------

@dataclass
class ElevationPrior:
    """Landmark height prior: none, linear interpolation, or a height field."""

    provider: str = "none"
    variance: float = 1.0
    surface: object | None = None
    anchor_a: np.ndarray | None = None   # (x, y, floor z) under submap a center
    anchor_b: np.ndarray | None = None

    def __post_init__(self):
        if self.provider not in ("none", "linear", "surface"):
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.provider != "none" and self.variance <= 0:
            raise ValueError("prior variance must be positive")

    @staticmethod
    def none() -> "ElevationPrior":
        return ElevationPrior("none")

    @staticmethod
    def linear(anchor_a, anchor_b, sigma: float = 1.0) -> "ElevationPrior":
        return ElevationPrior("linear", sigma ** 2,
                              anchor_a=np.asarray(anchor_a, dtype=float),
                              anchor_b=np.asarray(anchor_b, dtype=float))

    @staticmethod
    def from_surface(surface, sigma: float = 0.3) -> "ElevationPrior":
        return ElevationPrior("surface", sigma ** 2, surface=surface)

    def height_and_grad(self, x: float, y: float) -> tuple[float, float, float]:
        if self.provider == "none":
            raise ValueError("no elevation provider configured")
        if self.provider == "linear":
            a, b = self.anchor_a, self.anchor_b
            d = b[:2] - a[:2]
            denom = float(d @ d)
            if denom < 1e-12:
                return float(a[2]), 0.0, 0.0
            t = float((np.array([x, y]) - a[:2]) @ d) / denom
            if t <= 0.0:
                return float(a[2]), 0.0, 0.0
            if t >= 1.0:
                return float(b[2]), 0.0, 0.0
            g = (b[2] - a[2]) * d / denom
            return float(a[2] + (b[2] - a[2]) * t), float(g[0]), float(g[1])
        xy = torch.tensor([[x, y]], dtype=torch.float64)
        with torch.no_grad():
            h, g = self.surface.height_and_grad(xy)
        return float(h[0]), float(g[0, 0]), float(g[0, 1])


# --- two-view problem --------------------------------------------------------

@dataclass
class TwoViewObservation:
    landmark_index: int
    offset: Pose                # fixed center-to-ping-to-sensor transform
    measurement: SonarMeasurement


@dataclass
class TwoViewProblem:
    x_a: Pose
    x_b: Pose                   # dead-reckoned initial estimate
    obs_a: list[TwoViewObservation]
    obs_b: list[TwoViewObservation]
    landmarks_init: np.ndarray  # (M, 3)
    sigma_b: np.ndarray         # (3, 3) DR prior covariance over (x, y, yaw)

    def __post_init__(self):
        self.landmarks_init = np.asarray(self.landmarks_init, dtype=float)
        self.sigma_b = np.asarray(self.sigma_b, dtype=float)
        m = len(self.landmarks_init)
        seen_a = {o.landmark_index for o in self.obs_a}
        seen_b = {o.landmark_index for o in self.obs_b}
        if seen_a != set(range(m)) or seen_b != set(range(m)):
            raise ValueError("every landmark needs exactly one observation per submap")
        if np.any(np.linalg.eigvalsh(self.sigma_b) <= 0):
            raise ValueError("sigma_b must be SPD")

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks_init)

    def subset(self, indices) -> "TwoViewProblem":
        indices = list(indices)
        remap = {old: new for new, old in enumerate(indices)}
        pick = lambda obs: [TwoViewObservation(remap[o.landmark_index], o.offset,
                                               o.measurement)
                            for o in obs if o.landmark_index in remap]
        return TwoViewProblem(self.x_a, self.x_b, pick(self.obs_a), pick(self.obs_b),
                              self.landmarks_init[indices], self.sigma_b)


def _pose_planar(template: Pose, x: float, y: float, yaw: float) -> Pose:
    roll, pitch, _ = template.rpy
    return Pose(np.array([x, y, template.position[2]]),
                rpy_to_matrix(roll, pitch, yaw))


def _obs_residual(pose: Pose, pose_jac: bool, obs: TwoViewObservation,
                  landmark: np.ndarray):
    """Whitened range/bearing residual with Jacobians w.r.t. (x, y, yaw), l."""
    t_off, R_off = obs.offset.position, obs.offset.rotation
    R_b, t_b = pose.rotation, pose.position
    d = landmark - t_b
    q = R_b.T @ d
    p = R_off.T @ (q - t_off)
    r = float(np.linalg.norm(p))
    if r < 1e-12:
        raise ValueError("landmark collapsed onto the sensor origin")
    h = np.array([r, p[0]])
    z = np.array([obs.measurement.slant_range, obs.measurement.bearing_residual])
    Lw = np.linalg.cholesky(np.linalg.inv(obs.measurement.noise_cov))
    dh_dp = np.vstack([p / r, [1.0, 0.0, 0.0]])
    J_l = dh_dp @ (R_off.T @ R_b.T)
    J_x = None
    if pose_jac:
        _, _, yaw = pose.rpy
        dq_dyaw = (_d_rot_z(yaw) @ rpy_to_matrix(*pose.rpy[:2], 0.0)).T @ d
        dp_dt = R_off.T @ (-R_b.T)
        dp = np.column_stack([dp_dt[:, 0], dp_dt[:, 1], R_off.T @ dq_dyaw])
        J_x = dh_dp @ dp
        J_x = Lw.T @ J_x
    return Lw.T @ (h - z), (Lw.T @ J_l), J_x


def _assemble(problem: TwoViewProblem, prior: ElevationPrior, state: np.ndarray,
              include_dr_prior: bool = True):
    """Residual vector and Jacobian at a packed state [x_b(3); landmarks]."""
    m = problem.n_landmarks
    xb = _pose_planar(problem.x_b, state[0], state[1], state[2])
    lms = state[3:].reshape(m, 3)
    rows_r, rows_J = [], []
    n_state = 3 + 3 * m
    for obs in problem.obs_a:
        r, J_l, _ = _obs_residual(problem.x_a, False, obs, lms[obs.landmark_index])
        J = np.zeros((2, n_state))
        J[:, 3 + 3 * obs.landmark_index: 6 + 3 * obs.landmark_index] = J_l
        rows_r.append(r)
        rows_J.append(J)
    for obs in problem.obs_b:
        r, J_l, J_x = _obs_residual(xb, True, obs, lms[obs.landmark_index])
        J = np.zeros((2, n_state))
        J[:, 0:3] = J_x
        J[:, 3 + 3 * obs.landmark_index: 6 + 3 * obs.landmark_index] = J_l
        rows_r.append(r)
        rows_J.append(J)
    if include_dr_prior:
        Lw = np.linalg.cholesky(np.linalg.inv(problem.sigma_b))
        x_hat = np.array([problem.x_b.position[0], problem.x_b.position[1],
                          problem.x_b.yaw])
        dv = np.array([state[0] - x_hat[0], state[1] - x_hat[1],
                       float(wrap_angle(state[2] - x_hat[2]))])
        J = np.zeros((3, n_state))
        J[:, 0:3] = Lw.T
        rows_r.append(Lw.T @ dv)
        rows_J.append(J)
    if prior.provider != "none":
        w = 1.0 / math.sqrt(prior.variance)
        for k in range(m):
            h, gx, gy = prior.height_and_grad(lms[k, 0], lms[k, 1])
            J = np.zeros((1, n_state))
            J[0, 3 + 3 * k: 6 + 3 * k] = np.array([-gx, -gy, 1.0]) * w
            rows_r.append(np.array([(lms[k, 2] - h) * w]))
            rows_J.append(J)
    return np.concatenate(rows_r), np.vstack(rows_J)


@dataclass
class TwoViewResult:
    x_a: Pose
    x_b: Pose
    landmarks: np.ndarray
    lc_covariance: np.ndarray
    converged: bool
    n_iterations: int
    condition_number: float
    total_residual: float


def _levenberg_marquardt(fun, x0: np.ndarray, max_iter: int = 100,
                         tol_step: float = 1e-10, tol_grad: float = 1e-10):
    """Plain damped Gauss-Newton on a dense residual/Jacobian callback."""
    x = x0.copy()
    r, J = fun(x)
    cost = float(r @ r)
    mu = 1e-6 * max(np.diag(J.T @ J).max(), 1e-12)
    nu = 2.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        H = J.T @ J
        g = J.T @ r
        if np.abs(g).max() < tol_grad:
            converged = True
            break
        try:
            step = np.linalg.solve(H + mu * np.eye(len(x)), -g)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        if np.abs(step).max() < tol_step:
            converged = True
            break
        r_new, J_new = fun(x + step)
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            x, r, J, cost = x + step, r_new, J_new, cost_new
            mu = max(mu / 3.0, 1e-15)
            nu = 2.0
        else:
            mu *= nu
            nu = min(2.0 * nu, 64.0)
    return x, r, J, cost, converged, it


def solve_two_view(problem: TwoViewProblem, prior: ElevationPrior,
                   max_iter: int = 100) -> TwoViewResult:
    """MAP estimate of the second submap center and the shared landmarks.

    Minimizes whitened range/bearing residuals from both submaps, the DR
    prior on x_b, and (when configured) the elevation prior on each landmark.
    x_a stays fixed.  The returned loop-closure covariance is over x_b's
    (x, y, yaw) with the landmarks marginalized out.
    """
    if problem.n_landmarks < 1:
        raise ValueError("need at least one landmark")
    state0 = np.concatenate([
        [problem.x_b.position[0], problem.x_b.position[1], problem.x_b.yaw],
        problem.landmarks_init.ravel()])
    fun = lambda s: _assemble(problem, prior, s)
    state, r, J, cost, converged, n_iter = _levenberg_marquardt(
        fun, state0, max_iter=max_iter)
    H = J.T @ J
    Hxx, Hxl = H[:3, :3], H[:3, 3:]
    Hll = H[3:, 3:]
    H_red = Hxx - Hxl @ np.linalg.solve(Hll, Hxl.T)
    sv = np.linalg.svd(H_red, compute_uv=False)
    cond = float(sv[0] / max(sv[-1], 1e-300))
    lc_cov = np.linalg.pinv(H_red)
    xb = _pose_planar(problem.x_b, state[0], state[1], state[2])
    return TwoViewResult(problem.x_a, xb, state[3:].reshape(-1, 3), lc_cov,
                         converged, n_iter, cond, cost)


def reduced_measurement_hessian(problem: TwoViewProblem, prior: ElevationPrior,
                                state: np.ndarray | None = None) -> np.ndarray:
    """Landmark-marginalized Gauss-Newton Hessian of the measurement system.

    DR and pose priors are excluded: this is the degeneracy certificate for
    the pure two-view geometry (rank-deficient under parallel-track motion
    without an elevation prior), over x_b's free (x, y, yaw).
    """
    if state is None:
        state = np.concatenate([
            [problem.x_b.position[0], problem.x_b.position[1], problem.x_b.yaw],
            problem.landmarks_init.ravel()])
    _, J = _assemble(problem, prior, state, include_dr_prior=False)
    H = J.T @ J
    Hxx, Hxl, Hll = H[:3, :3], H[:3, 3:], H[3:, 3:]
    return Hxx - Hxl @ np.linalg.solve(Hll, Hxl.T)


def hessian_singular_ratio(H_red: np.ndarray) -> float:
    sv = np.linalg.svd(H_red, compute_uv=False)
    return float(sv[-1] / sv[0])


# --- triangulation error -----------------------------------------------------

def triangulate(obs_a: TwoViewObservation, obs_b: TwoViewObservation,
                x_a: Pose, x_b: Pose, init: np.ndarray, max_iter: int = 50):
    """Landmark minimizing both unweighted measurement residuals, poses fixed."""
    eye = np.eye(2)

    def fun(l):
        rows_r, rows_J = [], []
        for pose, obs in ((x_a, obs_a), (x_b, obs_b)):
            unit = TwoViewObservation(obs.landmark_index, obs.offset,
                                      SonarMeasurement(obs.measurement.slant_range,
                                                       obs.measurement.bearing_residual,
                                                       eye))
            r, J_l, _ = _obs_residual(pose, False, unit, l)
            rows_r.append(r)
            rows_J.append(J_l)
        return np.concatenate(rows_r), np.vstack(rows_J)

    l, r, _, _, _, _ = _levenberg_marquardt(fun, np.asarray(init, dtype=float),
                                            max_iter=max_iter)
    return l, float(np.linalg.norm(r))


def tri_err(observations: list[tuple[TwoViewObservation, TwoViewObservation]],
            x_a: Pose, x_b: Pose, inits: np.ndarray) -> float:
    """RMS of post-triangulation residual norms over held-out landmarks."""
    if not observations:
        raise ValueError("empty landmark set")
    norms = []
    for (oa, ob), init in zip(observations, np.asarray(inits, dtype=float)):
        _, n = triangulate(oa, ob, x_a, x_b, init)
        norms.append(n)
    return float(np.sqrt(np.mean(np.square(norms))))


# --- RANSAC gating -----------------------------------------------------------

@dataclass
class RansacConfig:
    iterations: int = 50
    sample_size: int = 6         # landmarks per hypothesis
    accept_ratio: float = 0.7    # thres2
    min_landmarks: int = 10      # thres1
    seed: int = 0


@dataclass
class LoopClosure:
    index_a: int
    index_b: int
    relative: np.ndarray         # (dx, dy, dyaw) of b in a's planar frame
    covariance: np.ndarray       # (3, 3)
    ratio: float


def relative_planar(x_a: Pose, x_b: Pose) -> np.ndarray:
    """Planar relative transform of b expressed in a's yaw frame."""
    Rz = rot_z(x_a.yaw)[:2, :2]
    dp = Rz.T @ (x_b.position[:2] - x_a.position[:2])
    return np.array([dp[0], dp[1], float(wrap_angle(x_b.yaw - x_a.yaw))])


def ransac_relative_pose(problem: TwoViewProblem, prior: ElevationPrior,
                         cfg: RansacConfig, index_a: int, index_b: int,
                         rng: np.random.Generator | None = None):
    """RANSAC over landmark subsets, gated on the triangulation-error ratio.

    Each iteration solves the two-view problem on a random sample and scores
    e_after / e_before on the complement; the best hypothesis is accepted iff
    its ratio beats the threshold.  Returns (LoopClosure | None, diagnostics).
    """
    rng = rng or np.random.default_rng(cfg.seed)
    m = problem.n_landmarks
    if m < cfg.min_landmarks:
        return None, {"reason": "too few landmarks", "n": m}
    obs_a = {o.landmark_index: o for o in problem.obs_a}
    obs_b = {o.landmark_index: o for o in problem.obs_b}
    best = None
    n_sample = min(cfg.sample_size, m - 1)
    for _ in range(cfg.iterations):
        sample = rng.choice(m, size=n_sample, replace=False)
        rest = [k for k in range(m) if k not in set(sample.tolist())]
        held_out = [(obs_a[k], obs_b[k]) for k in rest]
        inits = problem.landmarks_init[rest]
        e_before = tri_err(held_out, problem.x_a, problem.x_b, inits)
        result = solve_two_view(problem.subset(sample), prior)
        e_after = tri_err(held_out, result.x_a, result.x_b, inits)
        ratio = e_after / max(e_before, 1e-12)
        if best is None or ratio < best[0]:
            best = (ratio, result)
    ratio, result = best
    diag = {"ratio": ratio, "converged": result.converged,
            "condition_number": result.condition_number}
    if ratio >= cfg.accept_ratio:
        return None, diag
    Rz = rot_z(result.x_a.yaw)[:2, :2]
    G = np.eye(3)
    G[:2, :2] = Rz.T
    cov = G @ result.lc_covariance @ G.T
    return LoopClosure(index_a, index_b, relative_planar(result.x_a, result.x_b),
                       cov, ratio), diag


# --- pose graph --------------------------------------------------------------

@dataclass
class GraphEdge:
    i: int
    j: int
    relative: np.ndarray         # (dx, dy, dyaw) measured, in i's yaw frame
    information: np.ndarray      # (3, 3)


class PoseGraph:
    """Planar pose graph over per-ping poses; depth/roll/pitch carried fixed."""

    def __init__(self, vertices: list[Pose]):
        if not vertices:
            raise ValueError("empty graph")
        self.vertices = list(vertices)
        self.dr_edges: list[GraphEdge] = []
        self.lc_edges: list[GraphEdge] = []

    def add_dr_edge(self, i: int, j: int, relative, covariance) -> None:
        self.dr_edges.append(self._edge(i, j, relative, covariance))

    def add_lc_edge(self, i: int, j: int, relative, covariance) -> None:
        self.lc_edges.append(self._edge(i, j, relative, covariance))

    def _edge(self, i, j, relative, covariance) -> GraphEdge:
        n = len(self.vertices)
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError("edge endpoints outside the graph")
        info = np.linalg.inv(np.asarray(covariance, dtype=float))
        return GraphEdge(i, j, np.asarray(relative, dtype=float), info)

    def _check_connected(self) -> None:
        n = len(self.vertices)
        covered = np.zeros(n, dtype=bool)
        covered[0] = True
        adj = {}
        for e in self.dr_edges:
            adj.setdefault(e.i, []).append(e.j)
            adj.setdefault(e.j, []).append(e.i)
        stack = [0]
        while stack:
            v = stack.pop()
            for w in adj.get(v, []):
                if not covered[w]:
                    covered[w] = True
                    stack.append(w)
        if not covered.all():
            raise ValueError("pose graph is disconnected")

    def _state(self) -> np.ndarray:
        return np.concatenate([[p.position[0], p.position[1], p.yaw]
                               for p in self.vertices])

    def _residual(self, state: np.ndarray):
        """Sparse whitened residuals/Jacobian for anchor + all edges."""
        edges = self.dr_edges + self.lc_edges
        n = len(self.vertices)
        n_rows = 3 + 3 * len(edges)
        r = np.zeros(n_rows)
        rows, cols, vals = [], [], []
        # anchor vertex 0 at its initial estimate
        anchor_w = 1e4
        x0 = self.vertices[0]
        r[0] = (state[0] - x0.position[0]) * anchor_w
        r[1] = (state[1] - x0.position[1]) * anchor_w
        r[2] = float(wrap_angle(state[2] - x0.yaw)) * anchor_w
        for k in range(3):
            rows.append(k)
            cols.append(k)
            vals.append(anchor_w)
        for e_idx, e in enumerate(edges):
            base = 3 + 3 * e_idx
            si, sj = state[3 * e.i: 3 * e.i + 3], state[3 * e.j: 3 * e.j + 3]
            c, s = math.cos(si[2]), math.sin(si[2])
            Rzt = np.array([[c, s], [-s, c]])
            dRzt = np.array([[-s, c], [-c, -s]])
            dp = sj[:2] - si[:2]
            res = np.array([*(Rzt @ dp - e.relative[:2]),
                            float(wrap_angle(sj[2] - si[2] - e.relative[2]))])
            Lw = np.linalg.cholesky(e.information).T
            r[base: base + 3] = Lw @ res
            Ji = np.zeros((3, 3))
            Ji[:2, :2] = -Rzt
            Ji[:2, 2] = dRzt @ dp
            Ji[2, 2] = -1.0
            Jj = np.zeros((3, 3))
            Jj[:2, :2] = Rzt
            Jj[2, 2] = 1.0
            for Jblk, v in ((Lw @ Ji, e.i), (Lw @ Jj, e.j)):
                for a in range(3):
                    for b in range(3):
                        rows.append(base + a)
                        cols.append(3 * v + b)
                        vals.append(Jblk[a, b])
        J = sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, 3 * n))
        return r, J

    def optimize(self, max_iter: int = 50, tol_step: float = 1e-9) -> list[Pose]:
        """Batch MAP over all vertex planar states; returns optimized poses."""
        self._check_connected()
        state = self._state()
        r, J = self._residual(state)
        cost = float(r @ r)
        mu = 1e-6
        nu = 2.0
        n = len(state)
        for _ in range(max_iter):
            H = (J.T @ J).tocsc()
            g = J.T @ r
            if np.abs(g).max() < 1e-9:
                break
            step = spla.spsolve(H + mu * sp.identity(n, format="csc"), -g)
            if np.abs(step).max() < tol_step:
                break
            r_new, J_new = self._residual(state + step)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                state, r, J, cost = state + step, r_new, J_new, cost_new
                mu = max(mu / 3.0, 1e-12)
                nu = 2.0
            else:
                mu *= nu
                nu = min(2.0 * nu, 64.0)
        out = []
        for k, p in enumerate(self.vertices):
            roll, pitch, _ = p.rpy
            out.append(Pose(np.array([state[3 * k], state[3 * k + 1], p.position[2]]),
                            rpy_to_matrix(roll, pitch, state[3 * k + 2])))
        return out

    def residual_norm(self) -> float:
        r, _ = self._residual(self._state())
        return float(np.linalg.norm(r))
