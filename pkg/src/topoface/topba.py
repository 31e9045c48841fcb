"""Topology-aware bundle adjustment.

Jointly refines camera parameters and per-vertex positions against screen
tracks, with a uniform-Laplacian residual per vertex pulling each point
toward its 1-ring mean. The Laplacian term is implemented as a squared
residual sqrt(lam) * (p_j - mean(N(j))) inside the least-squares system;
lam = 1 corresponds to unit weighting of the smoothness energy.

Two modes:

* joint: one Levenberg-Marquardt run over cameras + points on the combined
  objective.
* alternating (default): block-coordinate descent on the combined objective;
  a camera stage (points frozen; only the reprojection term depends on the
  cameras) alternates with a point stage (cameras frozen) until the combined
  cost stabilizes. Every accepted step in either stage decreases the
  combined cost, so the reported trajectory is monotone.

Sparse linear algebra: normal equations with point-block elimination (Schur
complement over the cameras); small systems (< 200 active parameters) go
through a direct sparse factorization. The Laplacian couples points to
points, so the point block is solved with a sparse LU rather than the
classic block-diagonal inverse.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu

from .cameras import rotation_from_axis_angle, skew, so3_right_jacobian
from .correspondence import TrackSet
from .fusion import TopologizedCloud
from .mesh import TemplateMesh, laplacian_all
from .views import ViewPrediction

_BEHIND_CAP = 1e6
_DAMPING_MAX = 1e16
_DAMPING_MIN = 1e-14
_DIRECT_SOLVE_LIMIT = 200


class NoValidTracksError(ValueError):
    """The system has zero reprojection blocks; nothing to optimize."""


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 1.0                  # weight on the Laplacian term
    mode: str = "alternating"         # {"alternating", "joint"}
    max_outer_iters: int = 20
    max_lm_iters: int = 50            # per stage
    cost_rel_tol: float = 1e-8
    param_tol: float = 1e-10
    # a full alternation round improving the combined cost by less than this
    # fraction ends the outer loop; past that point the rounds only crawl
    # along the similarity gauge, which initialization is meant to anchor
    outer_rel_tol: float = 1e-3
    freeze_intrinsics: bool = True
    freeze_first_camera: bool = True
    huber_delta: float | None = None  # pixels; None disables the robust loss
    lm_damping_init: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.mode not in ("alternating", "joint"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("cost_rel_tol", "param_tol", "lm_damping_init", "outer_rel_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class BAState:
    """Optimizable snapshot: per-view intrinsics/pose and the point cloud."""

    intrinsics: np.ndarray  # (V, 4) fx fy cx cy
    rvecs: np.ndarray       # (V, 3) axis-angle, world->camera
    ts: np.ndarray          # (V, 3)
    points: np.ndarray      # (N, 3)

    def copy(self) -> "BAState":
        return BAState(
            self.intrinsics.copy(), self.rvecs.copy(), self.ts.copy(), self.points.copy()
        )


def initial_state(views: list[ViewPrediction], cloud: TopologizedCloud) -> BAState:
    return BAState(
        intrinsics=np.stack([v.intrinsics.as_array() for v in views]),
        rvecs=np.stack([v.pose.rvec for v in views]),
        ts=np.stack([v.pose.t for v in views]),
        points=cloud.points.copy(),
    )


@dataclass
class ResidualSystem:
    """Enumerated residual blocks plus the parameter layout.

    Residual vector layout: one 2-vector reprojection block per visible
    (view, vertex) track, then one 3-vector Laplacian block per vertex.
    Parameters: per camera 6 (+4 when intrinsics are free), then 3 per point;
    frozen parameters are excluded from every Jacobian.
    """

    obs_cam: np.ndarray   # (K,) sorted by camera
    obs_pt: np.ndarray    # (K,)
    obs_q: np.ndarray     # (K, 2)
    template: TemplateMesh
    n_views: int
    n_points: int
    config: SolverConfig
    track_counts: np.ndarray  # (N,) surviving tracks per vertex

    def __post_init__(self):
        self.cam_block = 6 if self.config.freeze_intrinsics else 10
        self.n_cam_params = self.n_views * self.cam_block
        self.n_params = self.n_cam_params + 3 * self.n_points
        # per-view observation slices (obs arrays are sorted by camera)
        self._view_starts = np.searchsorted(self.obs_cam, np.arange(self.n_views))
        self._view_ends = np.searchsorted(self.obs_cam, np.arange(self.n_views), side="right")
        self._lap_triplets = self._build_laplacian_triplets()

    @property
    def n_obs(self) -> int:
        return len(self.obs_cam)

    @property
    def n_residuals(self) -> int:
        return 2 * self.n_obs + 3 * self.n_points

    @property
    def sqrt_lam(self) -> float:
        return float(np.sqrt(self.config.lam))

    @property
    def unconstrained_vertices(self) -> np.ndarray:
        """Vertices with fewer than two surviving tracks."""
        return np.nonzero(self.track_counts < 2)[0]

    def default_active_mask(self) -> np.ndarray:
        mask = np.ones(self.n_params, dtype=bool)
        if self.config.freeze_first_camera:
            mask[0:6] = False
        return mask

    def point_col(self, j: int | np.ndarray) -> int | np.ndarray:
        return self.n_cam_params + 3 * j

    def _build_laplacian_triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Constant rows/cols/values of the Laplacian Jacobian (full layout)."""
        mesh = self.template
        n = self.n_points
        s = self.sqrt_lam
        counts = mesh.neighbor_counts
        axes = np.arange(3)
        # diagonal: d l_j / d p_j = s * I
        diag_rows = (2 * self.n_obs + 3 * np.arange(n)[:, None] + axes).ravel()
        diag_cols = (self.point_col(np.arange(n))[:, None] + axes).ravel()
        diag_vals = np.full(3 * n, s)
        # neighbors: d l_j / d p_k = -s / |N(j)| * I
        owner = np.repeat(np.arange(n), counts)
        nbr = mesh.nbr_indices
        nbr_rows = (2 * self.n_obs + 3 * owner[:, None] + axes).ravel()
        nbr_cols = (self.point_col(nbr)[:, None] + axes).ravel()
        nbr_vals = np.repeat(-s / counts[owner], 3)
        rows = np.concatenate([diag_rows, nbr_rows])
        cols = np.concatenate([diag_cols, nbr_cols])
        vals = np.concatenate([diag_vals, nbr_vals])
        return rows, cols, vals


class Evaluation(NamedTuple):
    residuals: np.ndarray
    cost: float
    behind_count: int


def build_system(
    views: list[ViewPrediction],
    tracks: TrackSet,
    cloud: TopologizedCloud,
    template: TemplateMesh,
    config: SolverConfig | None = None,
) -> ResidualSystem:
    config = config or SolverConfig()
    n_views, n = tracks.n_views, tracks.n_vertices
    if len(views) != n_views:
        raise ValueError("views/tracks view count mismatch")
    if n != template.n_vertices or cloud.points.shape[0] != n:
        raise ValueError("template/cloud/tracks vertex count mismatch")
    cam_idx, pt_idx = np.nonzero(tracks.visibility)
    if cam_idx.size == 0:
        raise NoValidTracksError("no valid tracks")
    order = np.lexsort((pt_idx, cam_idx))
    return ResidualSystem(
        obs_cam=cam_idx[order],
        obs_pt=pt_idx[order],
        obs_q=tracks.tracks[cam_idx[order], pt_idx[order]].astype(np.float64),
        template=template,
        n_views=n_views,
        n_points=n,
        config=config,
        track_counts=tracks.visibility.sum(axis=0).astype(np.int64),
    )


def _huber_weights(res: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-block sqrt IRLS weights and true robust cost contributions."""
    e = np.linalg.norm(res, axis=1)
    w = np.ones_like(e)
    out = e > delta
    w[out] = delta / e[out]
    rho = e**2
    rho[out] = 2.0 * delta * e[out] - delta**2
    return np.sqrt(w), rho


def evaluate(system: ResidualSystem, state: BAState) -> Evaluation:
    """Residual vector and cost 0.5 * (sum reproj + lam * sum laplacian).

    Blocks whose point falls at non-positive camera depth contribute a capped
    residual of 1e6 per component and are counted in behind_count. When a
    Huber scale is configured, reprojection residuals are returned IRLS-scaled
    and the cost uses the true robust loss.
    """
    r = np.zeros(system.n_residuals)
    behind = 0
    cost = 0.0
    delta = system.config.huber_delta
    for i in range(system.n_views):
        lo, hi = system._view_starts[i], system._view_ends[i]
        if lo == hi:
            continue
        sl = slice(lo, hi)
        pts = state.points[system.obs_pt[sl]]
        R = rotation_from_axis_angle(state.rvecs[i])
        cam = pts @ R.T + state.ts[i]
        z = cam[:, 2]
        bad = z <= 0.0
        zs = np.where(bad, 1.0, z)
        fx, fy, cx, cy = state.intrinsics[i]
        res = np.stack(
            [fx * cam[:, 0] / zs + cx, fy * cam[:, 1] / zs + cy], axis=1
        ) - system.obs_q[sl]
        res[bad] = _BEHIND_CAP
        behind += int(bad.sum())
        if delta is not None:
            good = ~bad
            sw, rho = _huber_weights(res[good], delta)
            cost += 0.5 * float(rho.sum()) + 0.5 * float((res[bad] ** 2).sum())
            res[good] *= sw[:, None]
        else:
            cost += 0.5 * float((res**2).sum())
        r[2 * lo: 2 * hi] = res.ravel()
    lap = system.sqrt_lam * laplacian_all(state.points, system.template)
    r[2 * system.n_obs:] = lap.ravel()
    cost += 0.5 * float((lap**2).sum())
    return Evaluation(residuals=r, cost=cost, behind_count=behind)


def jacobian(
    system: ResidualSystem, state: BAState, active_mask: np.ndarray | None = None
) -> sp.csr_matrix:
    """Analytic sparse Jacobian over the active parameter columns.

    Rows follow the residual layout of :func:`evaluate`; columns of frozen
    parameters are absent from the sparsity pattern. Behind-camera blocks get
    zero rows (their residual is a constant cap). With a Huber scale, rows are
    IRLS-weighted with the weights treated as constants of the linearization.
    """
    if active_mask is None:
        active_mask = system.default_active_mask()
    col_of = np.cumsum(active_mask) - 1
    col_of[~active_mask] = -1
    n_active = int(active_mask.sum())

    rows_l, cols_l, vals_l = [], [], []

    def emit(rows, cols, vals):
        mapped = col_of[cols]
        keep = mapped >= 0
        rows_l.append(rows[keep])
        cols_l.append(mapped[keep])
        vals_l.append(vals[keep])

    delta = system.config.huber_delta
    cb = system.cam_block
    for i in range(system.n_views):
        lo, hi = system._view_starts[i], system._view_ends[i]
        if lo == hi:
            continue
        sl = slice(lo, hi)
        k = hi - lo
        pts = state.points[system.obs_pt[sl]]
        rvec = state.rvecs[i]
        R = rotation_from_axis_angle(rvec)
        cam = pts @ R.T + state.ts[i]
        z = cam[:, 2]
        bad = z <= 0.0
        zs = np.where(bad, 1.0, z)
        fx, fy, cx, cy = state.intrinsics[i]
        inv_z = 1.0 / zs
        # d(u,v)/d(cam xyz)
        A = np.zeros((k, 2, 3))
        A[:, 0, 0] = fx * inv_z
        A[:, 0, 2] = -fx * cam[:, 0] * inv_z**2
        A[:, 1, 1] = fy * inv_z
        A[:, 1, 2] = -fy * cam[:, 1] * inv_z**2
        # d(cam)/d(rvec) = -R [p]x Jr(rvec), shared Jr per view
        Jr = so3_right_jacobian(rvec)
        P = np.zeros((k, 3, 3))
        P[:, 0, 1] = -pts[:, 2]
        P[:, 0, 2] = pts[:, 1]
        P[:, 1, 0] = pts[:, 2]
        P[:, 1, 2] = -pts[:, 0]
        P[:, 2, 0] = -pts[:, 1]
        P[:, 2, 1] = pts[:, 0]
        d_cam_d_rvec = -np.einsum("ab,kbc,cd->kad", R, P, Jr)
        J_rvec = np.einsum("kab,kbc->kac", A, d_cam_d_rvec)   # (k, 2, 3)
        J_t = A                                               # (k, 2, 3)
        J_p = np.einsum("kab,bc->kac", A, R)                  # (k, 2, 3)
        blocks = [J_rvec, J_t]
        if not system.config.freeze_intrinsics:
            J_K = np.zeros((k, 2, 4))
            J_K[:, 0, 0] = cam[:, 0] * inv_z
            J_K[:, 1, 1] = cam[:, 1] * inv_z
            J_K[:, 0, 2] = 1.0
            J_K[:, 1, 3] = 1.0
            blocks.append(J_K)
        if delta is not None:
            res = np.stack(
                [fx * cam[:, 0] * inv_z + cx, fy * cam[:, 1] * inv_z + cy], axis=1
            ) - system.obs_q[sl]
            sw = np.ones(k)
            sw[~bad], _ = _huber_weights(res[~bad], delta)
            for b in blocks:
                b *= sw[:, None, None]
            J_p *= sw[:, None, None]
        if bad.any():
            for b in blocks:
                b[bad] = 0.0
            J_p[bad] = 0.0
        J_cam = np.concatenate(blocks, axis=2)  # (k, 2, cb)
        base_rows = 2 * np.arange(lo, hi)
        rr = (base_rows[:, None, None] + np.array([0, 1])[None, :, None])
        cam_cols = i * cb + np.arange(cb)
        cc = np.broadcast_to(cam_cols[None, None, :], (k, 2, cb))
        emit(np.broadcast_to(rr, (k, 2, cb)).ravel(), cc.ravel(), J_cam.ravel())
        pt_cols = system.point_col(system.obs_pt[sl])
        cp = pt_cols[:, None, None] + np.arange(3)[None, None, :]
        emit(
            np.broadcast_to(rr, (k, 2, 3)).ravel(),
            np.broadcast_to(cp, (k, 2, 3)).ravel(),
            J_p.ravel(),
        )
    lr, lc, lv = system._lap_triplets
    emit(lr, lc, lv)
    rows = np.concatenate(rows_l)
    cols = np.concatenate(cols_l)
    vals = np.concatenate(vals_l)
    return sp.csr_matrix((vals, (rows, cols)), shape=(system.n_residuals, n_active))


@dataclass
class SolveReport:
    """Accepted-step cost trajectory, termination, and summary diagnostics."""

    cost_trajectory: list[float] = field(default_factory=list)
    termination: str = "max_iters"
    final_rms_px: float = float("nan")
    duration_s: float = 0.0
    n_outer_iters: int = 0
    behind_camera_blocks: int = 0
    unconstrained_vertex_count: int = 0
    unconstrained_vertices: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cost_trajectory": [float(c) for c in self.cost_trajectory],
            "termination": self.termination,
            "final_rms_px": float(self.final_rms_px),
            "duration_s": float(self.duration_s),
            "n_outer_iters": int(self.n_outer_iters),
            "behind_camera_blocks": int(self.behind_camera_blocks),
            "unconstrained_vertex_count": int(self.unconstrained_vertex_count),
            "unconstrained_vertices": [int(j) for j in self.unconstrained_vertices],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _pack(system: ResidualSystem, state: BAState) -> np.ndarray:
    cb = system.cam_block
    x = np.empty(system.n_params)
    for i in range(system.n_views):
        x[i * cb: i * cb + 3] = state.rvecs[i]
        x[i * cb + 3: i * cb + 6] = state.ts[i]
        if cb == 10:
            x[i * cb + 6: i * cb + 10] = state.intrinsics[i]
    x[system.n_cam_params:] = state.points.ravel()
    return x


def _unpack(system: ResidualSystem, x: np.ndarray, ref: BAState) -> BAState:
    cb = system.cam_block
    st = ref.copy()
    for i in range(system.n_views):
        st.rvecs[i] = x[i * cb: i * cb + 3]
        st.ts[i] = x[i * cb + 3: i * cb + 6]
        if cb == 10:
            st.intrinsics[i] = x[i * cb + 6: i * cb + 10]
    st.points = x[system.n_cam_params:].reshape(-1, 3).copy()
    return st


class _StepSolver:
    """Damped normal-equation solves for one system's sparsity pattern.

    The point block (data 3x3 blocks + Laplacian 2-ring coupling) is
    reordered once with reverse Cuthill-McKee and factored as a banded
    Cholesky; the camera block is eliminated through its Schur complement
    (dense, at most a few hundred parameters). Tiny systems go dense.
    """

    def __init__(self, system: "ResidualSystem"):
        mesh = system.template
        n = system.n_points
        owner = np.repeat(np.arange(n), mesh.neighbor_counts)
        ones = np.ones(len(mesh.nbr_indices))
        adj = sp.csr_matrix((ones, (owner, mesh.nbr_indices)), shape=(n, n))
        adj = adj + sp.eye(n)
        pattern = (adj @ adj).tocsr()  # Laplacian normal equations couple 2-rings
        perm = reverse_cuthill_mckee(pattern, symmetric_mode=True)
        self.pe = (3 * perm[:, None] + np.arange(3)).ravel()
        self.inv_pe = np.empty_like(self.pe)
        self.inv_pe[self.pe] = np.arange(len(self.pe))
        coo = pattern[perm][:, perm].tocoo()
        self.beta = 3 * int(np.abs(coo.row - coo.col).max()) + 2

    def _point_factor(self, App: sp.spmatrix):
        coo = App.tocoo()
        rp = self.inv_pe[coo.row]
        cp = self.inv_pe[coo.col]
        up = rp <= cp
        band = cp[up] - rp[up]
        if band.size and band.max() > self.beta:
            raise np.linalg.LinAlgError("point block outside precomputed band")
        ab = np.zeros((self.beta + 1, App.shape[0]))
        ab[self.beta - band, cp[up]] = coo.data[up]
        try:
            cb = cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as e:
            raise np.linalg.LinAlgError(f"point block not positive definite: {e}") from e

        def solve(b: np.ndarray) -> np.ndarray:
            x = cho_solve_banded((cb, False), b[self.pe])
            return x[self.inv_pe]

        return solve

    def solve(self, A: sp.spmatrix, g: np.ndarray, n_cam_active: int) -> np.ndarray:
        n = A.shape[0]
        nc = n_cam_active
        if n < _DIRECT_SOLVE_LIMIT or nc == n:
            delta = np.linalg.solve(A.toarray(), -g)
        elif nc == 0:
            delta = self._point_factor(A)(-g)
        else:
            App_solve = self._point_factor(A[nc:, nc:])
            Acc = A[:nc, :nc].toarray()
            Acp = A[:nc, nc:].tocsr()
            gc, gp = g[:nc], g[nc:]
            X = App_solve(Acp.T.toarray())           # App^{-1} Apc, (3N, nc)
            S = Acc - Acp @ X
            rhs = -gc + Acp @ App_solve(gp)
            dc = np.linalg.solve(S, rhs)
            dp = -App_solve(gp + Acp.T @ dc)
            delta = np.concatenate([dc, dp])
        if not np.isfinite(delta).all():
            raise np.linalg.LinAlgError("non-finite step")
        return delta


def _solve_normal_equations(
    solver: _StepSolver, H: sp.csc_matrix, D: np.ndarray, mu: float, g: np.ndarray, n_cam_active: int
) -> np.ndarray:
    return solver.solve((H + mu * sp.diags(D)).tocsr(), g, n_cam_active)


class _StageResult(NamedTuple):
    state: BAState
    cost: float
    reason: str
    n_accepted: int


def _get_step_solver(system: ResidualSystem) -> _StepSolver:
    solver = getattr(system, "_step_solver", None)
    if solver is None:
        solver = _StepSolver(system)
        system._step_solver = solver
    return solver


def _lm_stage(
    system: ResidualSystem,
    state: BAState,
    active_mask: np.ndarray,
    config: SolverConfig,
    trajectory: list[float],
) -> _StageResult:
    """LM over the active parameter subset, minimizing the combined cost."""
    act = np.nonzero(active_mask)[0]
    if act.size == 0:
        ev = evaluate(system, state)
        return _StageResult(state, ev.cost, "cost_tol", 0)
    solver = _get_step_solver(system)
    n_cam_active = int((act < system.n_cam_params).sum())
    x = _pack(system, state)
    ev = evaluate(system, state)
    cost = ev.cost
    r = ev.residuals
    mu = config.lm_damping_init
    consecutive_failures = 0
    accepted = 0
    for _ in range(config.max_lm_iters):
        J = jacobian(system, state, active_mask)
        g = J.T @ r
        if np.abs(g).max() == 0.0:
            return _StageResult(state, cost, "cost_tol", accepted)
        H = (J.T @ J).tocsc()
        D = np.maximum(H.diagonal(), 1e-12)
        step_taken = False
        while True:
            try:
                delta = _solve_normal_equations(solver, H, D, mu, g, n_cam_active)
            except (RuntimeError, np.linalg.LinAlgError, ValueError):
                consecutive_failures += 1
                if consecutive_failures >= 10:
                    return _StageResult(state, cost, "solver_failure", accepted)
                mu *= 10.0
                if mu > _DAMPING_MAX:
                    return _StageResult(state, cost, "param_tol", accepted)
                continue
            consecutive_failures = 0
            x_new = x.copy()
            x_new[act] += delta
            cand = _unpack(system, x_new, state)
            ev_new = evaluate(system, cand)
            if ev_new.cost < cost:
                prev = cost
                x, state, cost, r = x_new, cand, ev_new.cost, ev_new.residuals
                trajectory.append(cost)
                accepted += 1
                mu = max(mu / 3.0, _DAMPING_MIN)
                step_taken = True
                if prev - cost <= config.cost_rel_tol * max(prev, 1e-300):
                    return _StageResult(state, cost, "cost_tol", accepted)
                if np.linalg.norm(delta) <= config.param_tol * (
                    np.linalg.norm(x[act]) + config.param_tol
                ):
                    return _StageResult(state, cost, "param_tol", accepted)
                break
            mu *= 10.0
            if mu > _DAMPING_MAX:
                return _StageResult(state, cost, "param_tol", accepted)
        if not step_taken:
            return _StageResult(state, cost, "param_tol", accepted)
    return _StageResult(state, cost, "max_iters", accepted)


def rms_reprojection(system: ResidualSystem, state: BAState) -> float:
    """RMS of raw reprojection residual components (pixels), capped blocks excluded."""
    cfg = system.config
    raw_cfg = SolverConfig(
        lam=cfg.lam, mode=cfg.mode, freeze_intrinsics=cfg.freeze_intrinsics,
        freeze_first_camera=cfg.freeze_first_camera, huber_delta=None,
    )
    sys_raw = ResidualSystem(
        obs_cam=system.obs_cam, obs_pt=system.obs_pt, obs_q=system.obs_q,
        template=system.template, n_views=system.n_views, n_points=system.n_points,
        config=raw_cfg, track_counts=system.track_counts,
    )
    ev = evaluate(sys_raw, state)
    res = ev.residuals[: 2 * system.n_obs].reshape(-1, 2)
    good = ~(res == _BEHIND_CAP).all(axis=1)
    if not good.any():
        return float("nan")
    return float(np.sqrt((res[good] ** 2).mean()))


def solve(
    system: ResidualSystem, state: BAState, config: SolverConfig | None = None
) -> tuple[BAState, SolveReport]:
    """Run TopBA; returns the refined state and a report.

    The trajectory holds the combined cost at the initial state and after
    every accepted LM step of every stage; it is non-increasing. With
    freeze_first_camera the first camera's parameters are bit-identical
    before and after.
    """
    config = config or system.config
    if config is not system.config:
        system = ResidualSystem(
            obs_cam=system.obs_cam, obs_pt=system.obs_pt, obs_q=system.obs_q,
            template=system.template, n_views=system.n_views, n_points=system.n_points,
            config=config, track_counts=system.track_counts,
        )
    t0 = time.perf_counter()
    state = state.copy()
    base_mask = system.default_active_mask()
    cam_mask = base_mask.copy()
    cam_mask[system.n_cam_params:] = False
    pt_mask = base_mask.copy()
    pt_mask[: system.n_cam_params] = False

    ev0 = evaluate(system, state)
    trajectory = [ev0.cost]
    report = SolveReport(cost_trajectory=trajectory)
    unc = system.unconstrained_vertices
    report.unconstrained_vertex_count = int(len(unc))
    report.unconstrained_vertices = [int(j) for j in unc]

    if config.mode == "joint":
        result = _lm_stage(system, state, base_mask, config, trajectory)
        state = result.state
        report.termination = result.reason
        report.n_outer_iters = 1
    else:
        cost_prev = ev0.cost
        reason = "max_iters"
        for outer in range(config.max_outer_iters):
            res_cam = _lm_stage(system, state, cam_mask, config, trajectory)
            state = res_cam.state
            res_pt = _lm_stage(system, state, pt_mask, config, trajectory)
            state = res_pt.state
            report.n_outer_iters = outer + 1
            if "solver_failure" in (res_cam.reason, res_pt.reason):
                reason = "solver_failure"
                break
            cost = res_pt.cost
            if cost_prev - cost <= config.outer_rel_tol * max(cost_prev, 1e-300):
                reason = "cost_tol"
                break
            if res_cam.n_accepted == 0 and res_pt.n_accepted == 0:
                reason = "param_tol"
                break
            cost_prev = cost
        report.termination = reason

    ev_final = evaluate(system, state)
    report.behind_camera_blocks = ev_final.behind_count
    report.final_rms_px = rms_reprojection(system, state)
    report.duration_s = time.perf_counter() - t0
    return state, report
