"""Linear shape model fitting against distilled per-view point clouds.

The baseline counterpart to free-form TopBA: vertices are confined to
mean + basis @ coefficients, followed by a global rigid + uniform-scale
transform, and fitted to the tracked point-map samples with first-order
gradient descent with adaptive moments (Adam). The fit is deterministic:
there is no stochasticity anywhere in the loss or the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import rotation_from_axis_angle, so3_right_jacobian
from .correspondence import TrackSet
from .views import ViewPrediction


class ModelRankError(ValueError):
    pass


class FitDivergenceError(RuntimeError):
    pass


@dataclass
class LinearShapeModel:
    mean: np.ndarray    # (N, 3)
    basis: np.ndarray   # (K, 3N), rows are concatenated shape directions
    rvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    log_scale: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1, 3)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        n3 = self.mean.size
        if self.basis.ndim != 2 or self.basis.shape[1] != n3:
            raise ValueError(f"basis must be (K, {n3}), got {self.basis.shape}")
        if self.basis.shape[0] > n3:
            raise ModelRankError("more basis vectors than degrees of freedom")
        if np.linalg.matrix_rank(self.basis) < self.basis.shape[0]:
            raise ModelRankError("basis vectors are linearly dependent")
        self.rvec = np.asarray(self.rvec, dtype=np.float64).reshape(3).copy()
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0]

    @property
    def n_coefficients(self) -> int:
        return self.basis.shape[0]


def synthesize(model: LinearShapeModel, coefficients: np.ndarray) -> np.ndarray:
    """rigid(mean + basis @ coefficients) as (N, 3) points."""
    coefficients = np.asarray(coefficients, dtype=np.float64).reshape(model.n_coefficients)
    y = model.mean + (coefficients @ model.basis).reshape(-1, 3)
    R = rotation_from_axis_angle(model.rvec)
    return np.exp(model.log_scale) * y @ R.T + model.translation


@dataclass(frozen=True)
class FitConfig:
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    max_steps: int = 2000
    grad_tol: float = 1e-7
    optimize_rigid: bool = True
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decays must be in (0, 1)")


def distill_targets(
    views: list[ViewPrediction], tracks: TrackSet
) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-vertex (count, sum of tracked samples, total squared norm).

    Visible tracks whose point-map sample is non-finite are skipped, the
    same demotion rule fusion applies.
    """
    n = tracks.n_vertices
    counts = np.zeros(n)
    sums = np.zeros((n, 3))
    sq = 0.0
    for i, view in enumerate(views):
        j = np.nonzero(tracks.visibility[i])[0]
        if j.size == 0:
            continue
        cols = tracks.tracks[i, j, 0].astype(np.int64)
        rows = tracks.tracks[i, j, 1].astype(np.int64)
        samples = view.point_map[rows, cols]
        ok = np.isfinite(samples).all(axis=1)
        counts[j[ok]] += 1
        sums[j[ok]] += samples[ok]
        sq += float((samples[ok] ** 2).sum())
    return counts, sums, sq


def _loss_and_grad(
    model: LinearShapeModel,
    theta: np.ndarray,
    counts: np.ndarray,
    target_sums: np.ndarray,
    target_sq: float,
    optimize_rigid: bool,
) -> tuple[float, np.ndarray]:
    """L = sum_ij v_ij ||x_j - sample_ij||^2 and its gradient.

    Expanded per vertex: c_j ||x_j||^2 - 2 x_j . S_j + const, which avoids
    touching the per-track samples each step.
    """
    k = model.n_coefficients
    coeffs = theta[:k]
    rvec = theta[k:k + 3]
    t = theta[k + 3:k + 6]
    log_s = theta[k + 6]
    s = np.exp(log_s)
    R = rotation_from_axis_angle(rvec)
    y = model.mean + (coeffs @ model.basis).reshape(-1, 3)
    x = s * y @ R.T + t
    loss = float((counts * (x**2).sum(axis=1)).sum() - 2.0 * (x * target_sums).sum() + target_sq)
    G = 2.0 * (counts[:, None] * x - target_sums)         # dL/dx_j
    grad = np.empty_like(theta)
    GR = G @ R                                            # rows are R^T G_j
    grad[:k] = model.basis @ (s * GR).ravel()
    if optimize_rigid:
        Jr = so3_right_jacobian(rvec)
        grad[k:k + 3] = s * (Jr.T @ np.cross(y, GR).sum(axis=0))
        grad[k + 3:k + 6] = G.sum(axis=0)
        grad[k + 6] = float(s * (GR * y).sum())
    else:
        grad[k:] = 0.0
    return loss, grad


@dataclass
class FitResult:
    coefficients: np.ndarray
    rvec: np.ndarray
    translation: np.ndarray
    scale: float
    loss: float
    initial_loss: float
    n_steps: int
    grad_norm: float

    def to_dict(self) -> dict:
        return {
            "coefficients": [float(c) for c in self.coefficients],
            "rvec": [float(v) for v in self.rvec],
            "translation": [float(v) for v in self.translation],
            "scale": float(self.scale),
            "loss": float(self.loss),
            "initial_loss": float(self.initial_loss),
            "n_steps": int(self.n_steps),
            "grad_norm": float(self.grad_norm),
        }


def fit(
    model: LinearShapeModel,
    views: list[ViewPrediction],
    tracks: TrackSet,
    config: FitConfig | None = None,
) -> FitResult:
    """Minimize the visibility-weighted squared error to the tracked samples.

    Adam over [coefficients, rotation, translation, log-scale], starting from
    zero coefficients and the model's stored rigid transform. Aborts when the
    loss exceeds 1e3 x the initial loss.
    """
    config = config or FitConfig()
    counts, sums, sq = distill_targets(views, tracks)
    k = model.n_coefficients
    theta = np.concatenate(
        [np.zeros(k), model.rvec, model.translation, [model.log_scale]]
    )
    loss0, _ = _loss_and_grad(model, theta, counts, sums, sq, config.optimize_rigid)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    loss, grad = loss0, None
    steps = 0
    for step in range(1, config.max_steps + 1):
        loss, grad = _loss_and_grad(model, theta, counts, sums, sq, config.optimize_rigid)
        if loss > 1e3 * (loss0 + 1e-12):
            raise FitDivergenceError(
                f"loss diverged at step {step}: {loss:.6g} vs initial {loss0:.6g}"
            )
        gnorm = float(np.abs(grad).max())
        if gnorm < config.grad_tol:
            steps = step - 1
            break
        m = config.beta1 * m + (1.0 - config.beta1) * grad
        v = config.beta2 * v + (1.0 - config.beta2) * grad**2
        m_hat = m / (1.0 - config.beta1**step)
        v_hat = v / (1.0 - config.beta2**step)
        theta = theta - config.step_size * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        steps = step
    loss, grad = _loss_and_grad(model, theta, counts, sums, sq, config.optimize_rigid)
    return FitResult(
        coefficients=theta[:k].copy(),
        rvec=theta[k:k + 3].copy(),
        translation=theta[k + 3:k + 6].copy(),
        scale=float(np.exp(theta[k + 6])),
        loss=loss,
        initial_loss=loss0,
        n_steps=steps,
        grad_norm=float(np.abs(grad).max()),
    )


def fitted_vertices(model: LinearShapeModel, result: FitResult) -> np.ndarray:
    fitted = LinearShapeModel(
        mean=model.mean,
        basis=model.basis,
        rvec=result.rvec,
        translation=result.translation,
        log_scale=float(np.log(result.scale)),
    )
    return synthesize(fitted, result.coefficients)


def make_random_model(
    n_vertices: int, n_coefficients: int, seed: int = 0, mean: np.ndarray | None = None
) -> LinearShapeModel:
    """Synthetic stand-in for a licensed morphable basis: random orthonormal
    directions over the template; exhibits the same span restriction."""
    rng = np.random.default_rng(seed)
    if mean is None:
        mean = np.zeros((n_vertices, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3 * n_vertices, n_coefficients)))
    return LinearShapeModel(mean=mean, basis=q.T)


def save_model(path: str | Path, model: LinearShapeModel) -> None:
    """Two grid records in one container: mean (1,N,3) then basis (K,N,3)."""
    from .gridio import write_grids

    n, k = model.n_vertices, model.n_coefficients
    write_grids(
        path,
        [
            model.mean.reshape(1, n, 3).astype(np.float32),
            model.basis.reshape(k, n, 3).astype(np.float32),
        ],
    )


def load_model(path: str | Path) -> LinearShapeModel:
    from .gridio import GridFormatError, read_grids

    grids = read_grids(path)
    if len(grids) != 2:
        raise GridFormatError(f"{path}: model container must hold exactly 2 grids")
    mean, basis = grids
    if mean.shape[0] != 1 or mean.shape[2] != 3 or basis.shape[2] != 3:
        raise GridFormatError(f"{path}: unexpected model grid shapes {mean.shape}, {basis.shape}")
    if basis.shape[1] != mean.shape[1]:
        raise GridFormatError(f"{path}: basis/mean vertex counts differ")
    n = mean.shape[1]
    return LinearShapeModel(
        mean=mean.reshape(n, 3).astype(np.float64),
        basis=basis.reshape(basis.shape[0], 3 * n).astype(np.float64),
    )
