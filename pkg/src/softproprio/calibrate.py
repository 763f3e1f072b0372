"""CMA-ES and single-reference-frame scene calibration.

The optimiser is the standard non-elitist (mu/mu_w, lambda) CMA-ES with
cumulative step-size adaptation and rank-one plus rank-mu covariance updates
(Hansen's tutorial formulation, without active negative weights).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import scene as scene_layout
from .renderer import BinaryImage, CameraModel, MarkerSet, image_mse, render_binary
from .scene import SceneParams
from .simulator import TriMesh


class CmaError(ValueError):
    pass


def default_popsize(n: int) -> int:
    return 4 + int(math.floor(3 * math.log(n)))


@dataclass
class CmaConfig:
    dimension: int
    popsize: int | None = None
    sigma0: float = 0.5
    max_iterations: int = 1000
    max_evaluations: int | None = None
    fitness_tolerance: float = 1e-12
    target: float = -math.inf
    seed: int = 0

    def __post_init__(self):
        if self.dimension < 1:
            raise CmaError("dimension must be at least 1")
        if self.popsize is None:
            self.popsize = default_popsize(self.dimension)
        if self.popsize < 2:
            raise CmaError("population size must be at least 2")

    @property
    def mu(self) -> int:
        return self.popsize // 2

    @property
    def weights(self) -> np.ndarray:
        raw = math.log((self.popsize + 1) / 2.0) - np.log(np.arange(1, self.mu + 1))
        return raw / raw.sum()


@dataclass
class CmaState:
    config: CmaConfig
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0
    eigen_generation: int = 0
    basis: np.ndarray = field(default=None)
    scales: np.ndarray = field(default=None)  # sqrt of eigenvalues
    rng: np.random.Generator = field(default=None, repr=False)
    # strategy constants
    mueff: float = 0.0
    c_sigma: float = 0.0
    d_sigma: float = 0.0
    c_c: float = 0.0
    c_1: float = 0.0
    c_mu: float = 0.0
    chi_n: float = 0.0

    @property
    def dimension(self) -> int:
        return self.mean.size

    def invsqrt_cov(self) -> np.ndarray:
        return self.basis @ np.diag(1.0 / self.scales) @ self.basis.T

    def condition_number(self) -> float:
        return float((self.scales.max() / self.scales.min()) ** 2)


def cma_init(config: CmaConfig, x0, sigma0: float | None = None) -> CmaState:
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    n = config.dimension
    if x0.size != n:
        raise CmaError(f"initial point has dimension {x0.size}, expected {n}")
    sigma0 = config.sigma0 if sigma0 is None else sigma0
    if not sigma0 > 0:
        raise CmaError("initial step size must be positive")
    w = config.weights
    mueff = 1.0 / np.sum(w**2)
    c_sigma = (mueff + 2) / (n + mueff + 5)
    d_sigma = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + c_sigma
    c_c = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    c_1 = 2 / ((n + 1.3) ** 2 + mueff)
    c_mu = min(1 - c_1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    return CmaState(
        config=config,
        mean=x0.copy(),
        sigma=float(sigma0),
        cov=np.eye(n),
        p_sigma=np.zeros(n),
        p_c=np.zeros(n),
        basis=np.eye(n),
        scales=np.ones(n),
        rng=np.random.default_rng(config.seed),
        mueff=mueff,
        c_sigma=c_sigma,
        d_sigma=d_sigma,
        c_c=c_c,
        c_1=c_1,
        c_mu=c_mu,
        chi_n=math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n)),
    )


def cma_ask(state: CmaState, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample ``lambda`` candidates ``m + sigma * B D z`` as rows of an array."""
    rng = state.rng if rng is None else rng
    z = rng.standard_normal((state.config.popsize, state.dimension))
    return state.mean + state.sigma * (z * state.scales) @ state.basis.T


def cma_tell(state: CmaState, candidates, fitnesses) -> CmaState:
    """Update mean, paths, covariance and step size from one evaluated generation.

    Ranking is by fitness with ties kept in input order.  The state is
    updated in place and returned.
    """
    x = np.asarray(candidates, dtype=np.float64)
    f = np.asarray(fitnesses, dtype=np.float64).reshape(-1)
    lam = state.config.popsize
    n = state.dimension
    if x.shape != (lam, n) or f.shape != (lam,):
        raise CmaError(f"expected {lam} candidates of dimension {n} with one fitness each")
    if not np.all(np.isfinite(f)):
        raise CmaError("fitness values must be finite")
    order = np.argsort(f, kind="stable")
    w = state.config.weights
    mu = state.config.mu
    y = (x[order[:mu]] - state.mean) / state.sigma
    y_w = w @ y
    state.mean = state.mean + state.sigma * y_w

    cs, cc, c1, cmu = state.c_sigma, state.c_c, state.c_1, state.c_mu
    state.p_sigma = (1 - cs) * state.p_sigma + math.sqrt(cs * (2 - cs) * state.mueff) * (state.invsqrt_cov() @ y_w)
    g = state.generation + 1
    ps_norm = np.linalg.norm(state.p_sigma)
    h_sigma = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * g)) < (1.4 + 2 / (n + 1)) * state.chi_n
    state.p_c = (1 - cc) * state.p_c + (h_sigma * math.sqrt(cc * (2 - cc) * state.mueff)) * y_w
    delta_h = (1 - h_sigma) * cc * (2 - cc)
    rank_mu = (y.T * w) @ y
    cov = (1 + c1 * delta_h - c1 - cmu) * state.cov + c1 * np.outer(state.p_c, state.p_c) + cmu * rank_mu
    state.cov = 0.5 * (cov + cov.T)
    state.sigma = state.sigma * math.exp((cs / state.d_sigma) * (ps_norm / state.chi_n - 1))
    state.generation = g

    if g - state.eigen_generation > lam / (c1 + cmu) / n / 10:
        _refresh_eigen(state)
    return state


def _refresh_eigen(state: CmaState) -> None:
    vals, vecs = np.linalg.eigh(state.cov)
    if vals.min() <= 0:
        raise CmaError(f"covariance lost positive definiteness (min eigenvalue {vals.min():.3e})")
    state.basis = vecs
    state.scales = np.sqrt(vals)
    state.eigen_generation = state.generation


@dataclass
class CmaResult:
    best_x: np.ndarray
    best_f: float
    history: list[float]  # best fitness of each generation (generation 0 = initial mean)
    evaluations: int
    iterations: int
    stop_reason: str
    state: CmaState


def cma_minimize(f, config: CmaConfig, x0, sigma0: float | None = None, transform=None) -> CmaResult:
    """Minimise ``f`` with CMA-ES; the initial mean is evaluated first.

    ``transform`` maps sampled candidates before evaluation (for example
    clamping into a box); the transformed candidates are what gets told to
    the optimiser and what ``best_x`` reports.
    """
    state = cma_init(config, x0, sigma0)
    start = state.mean.copy() if transform is None else np.asarray(transform(state.mean))
    best_x = start.copy()
    best_f = float(f(start))
    evals = 1
    history = [best_f]
    if best_f <= config.target:
        return CmaResult(best_x, best_f, history, evals, 0, "target", state)
    reason = "max_iterations"
    while state.generation < config.max_iterations:
        cand = cma_ask(state)
        if transform is not None:
            cand = np.array([transform(c) for c in cand])
        fit = np.array([float(f(c)) for c in cand])
        evals += len(cand)
        cma_tell(state, cand, fit)
        i = int(np.argmin(fit))
        if fit[i] < best_f:
            best_f, best_x = float(fit[i]), cand[i].copy()
        history.append(float(fit.min()))
        if best_f <= config.target:
            reason = "target"
            break
        if fit.max() - fit.min() < config.fitness_tolerance:
            reason = "tolerance"
            break
        if config.max_evaluations is not None and evals >= config.max_evaluations:
            reason = "max_evaluations"
            break
    return CmaResult(best_x, best_f, history, evals, state.generation, reason, state)


@dataclass
class CalibrationConfig:
    max_iterations: int = 150
    popsize: int = 14
    sigma0: float = 0.3  # in units of each coordinate's box half-width
    seed: int = 0
    converged_ratio: float = 0.05


@dataclass
class CalibrationReport:
    theta: SceneParams
    initial_mse: float
    final_mse: float
    iterations: int
    per_generation_best: list[float]
    converged: bool

    def to_dict(self) -> dict:
        return {
            "initial_mse": self.initial_mse,
            "final_mse": self.final_mse,
            "iterations": self.iterations,
            "theta": self.theta.to_list(),
            "per_generation_best": list(self.per_generation_best),
            "converged": self.converged,
        }


def calibrate_scene(reference: BinaryImage, camera: CameraModel, markers: MarkerSet, mesh: TriMesh,
                    config: CalibrationConfig | None = None) -> CalibrationReport:
    """Fit the scene adjustment vector so the render matches ``reference``.

    The search runs in box-normalised coordinates (each component divided by
    its half-width) from the designed scene, with candidates clamped into the
    box before rendering.
    """
    config = config or CalibrationConfig()
    if reference.pixels.shape != (camera.image_size, camera.image_size):
        raise CmaError(
            f"reference image is {reference.pixels.shape}, camera renders {camera.image_size}x{camera.image_size}"
        )
    hw = scene_layout.half_widths()

    def objective(z):
        return image_mse(render_binary(camera, markers, mesh, SceneParams(z * hw)), reference)

    cma_cfg = CmaConfig(
        dimension=scene_layout.DIMENSION,
        popsize=config.popsize,
        sigma0=config.sigma0,
        max_iterations=config.max_iterations,
        fitness_tolerance=0.0,
        target=0.0,
        seed=config.seed,
    )
    result = cma_minimize(objective, cma_cfg, np.zeros(scene_layout.DIMENSION),
                          transform=lambda z: np.clip(z, -1.0, 1.0))
    initial = result.history[0]
    theta = SceneParams.clamped(result.best_x * hw)
    final = float(result.best_f)
    converged = final == 0.0 or final <= config.converged_ratio * initial
    return CalibrationReport(theta, initial, final, result.iterations, result.history, bool(converged))


class SceneCalibrator(BaseEstimator):
    """Estimator wrapper: ``fit(reference_image)`` learns ``theta_``."""

    def __init__(self, camera=None, markers=None, mesh=None, max_iterations=150, popsize=14,
                 sigma0=0.3, seed=0):
        self.camera = camera
        self.markers = markers
        self.mesh = mesh
        self.max_iterations = max_iterations
        self.popsize = popsize
        self.sigma0 = sigma0
        self.seed = seed

    def fit(self, X, y=None):
        reference = X if isinstance(X, BinaryImage) else BinaryImage(np.asarray(X))
        cfg = CalibrationConfig(self.max_iterations, self.popsize, self.sigma0, self.seed)
        self.report_ = calibrate_scene(reference, self.camera, self.markers, self.mesh, cfg)
        self.theta_ = self.report_.theta
        return self

    def transform(self, meshes):
        """Render each mesh under the calibrated scene."""
        check_is_fitted(self, "theta_")
        return [render_binary(self.camera, self.markers, m, self.theta_) for m in meshes]

    def score(self, X, y=None):
        check_is_fitted(self, "theta_")
        reference = X if isinstance(X, BinaryImage) else BinaryImage(np.asarray(X))
        return -image_mse(render_binary(self.camera, self.markers, self.mesh, self.theta_), reference)
