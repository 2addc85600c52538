"""Pose sampling, multi-start initialization, and gradient-based registration.

The optimizer works on a flat Euclidean parameter vector (see lie.PoseParam):
rotation entries first, translation last. Each iteration decodes the
parameters to a pose, renders with per-pixel pose Jacobians, chains the
image-metric gradient through the renderer Jacobian and the parameterization,
and takes one Adam step. The pose gradient is taken with respect to a left
se(3) perturbation; the parameterization contributes a small chain-rule
factor d(perturbation)/d(parameters) evaluated by central differences of the
closed-form decode map.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError
from .geometry import Detector
from .lie import Pose, PoseParam, compose, exp_se3, inverse, log_se3, param_to_pose, pose_to_param
from .render import Image, render, render_with_jacobian
from .similarity import MetricConfig, evaluate, evaluate_grad, sample_patch_centers
from .volume import Volume

_CHAIN_FD_STEP = 1e-6


@dataclass
class SamplerConfig:
    """Per-axis normal scales for tangent-space pose perturbations."""

    sigma_rot: np.ndarray = field(default_factory=lambda: np.full(3, 0.2))
    sigma_trans: np.ndarray = field(default_factory=lambda: np.array([30.0, 30.0, 60.0]))

    def __post_init__(self):
        self.sigma_rot = np.asarray(self.sigma_rot, dtype=float).reshape(3)
        self.sigma_trans = np.asarray(self.sigma_trans, dtype=float).reshape(3)
        if np.any(self.sigma_rot <= 0) or np.any(self.sigma_trans <= 0):
            raise ValueError("sampler sigmas must be positive")


@dataclass
class OptimConfig:
    param_kind: str = "se3"
    lr_rot: float = 7.5e-3
    lr_trans: float = 7.5
    max_iters: int = 250
    decay: float = 0.9
    decay_every: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_improve: float = 0.05
    patience: int = 20

    def __post_init__(self):
        if self.lr_rot < 0 or self.lr_trans < 0:
            raise ValueError("learning rates must be nonnegative")
        if not (0 < self.decay <= 1):
            raise ValueError("decay must be in (0, 1]")
        if self.patience < 1 or self.max_iters < 1 or self.decay_every < 1:
            raise ValueError("patience, max_iters, decay_every must be >= 1")


@dataclass
class TrajectoryRow:
    iteration: int
    pose: Pose
    similarity: float
    grad_norm: float
    millis: float

    def __post_init__(self):
        if not np.isfinite(self.similarity):
            raise ValueError("recorded similarity must be finite")


@dataclass
class Trajectory:
    rows: list[TrajectoryRow] = field(default_factory=list)

    def append(self, row: TrajectoryRow):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def similarities(self) -> np.ndarray:
        return np.array([r.similarity for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "w0", "w1", "w2", "u0", "u1", "u2", "similarity", "grad_norm", "ms"])
            for r in self.rows:
                v = log_se3(r.pose)
                writer.writerow(
                    [r.iteration]
                    + [repr(float(x)) for x in v]
                    + [repr(r.similarity), repr(r.grad_norm), repr(r.millis)]
                )


def sample_pose(iso: Pose, cfg: SamplerConfig, rng: np.random.Generator) -> Pose:
    """Perturb the isocenter pose by exp of a normal tangent draw."""
    sigma = np.concatenate([cfg.sigma_rot, cfg.sigma_trans])
    return compose(exp_se3(rng.normal(size=6) * sigma), iso)


def _score_candidate(metric: MetricConfig, fixed, img: Image, patches) -> float:
    try:
        return evaluate(metric, fixed, img, patches)
    except DegenerateInputError:
        warnings.warn("degenerate render scored 0 during initialization")
        return 0.0


def init_multistart(
    fixed: np.ndarray,
    vol: Volume,
    det: Detector,
    iso: Pose,
    n: int,
    metric: MetricConfig,
    rng: np.random.Generator,
    sampler: SamplerConfig | None = None,
) -> Pose:
    """Best-scoring pose among the isocenter plus n sampled candidates.

    Candidate 0 is always the isocenter; ties keep the lowest index. Sparse
    metrics score every candidate on one shared patch set.
    """
    if n < 1:
        raise ValueError("need at least one candidate")
    sampler = sampler or SamplerConfig()
    patches = None
    if metric.kind == "sparse_mncc":
        patches = sample_patch_centers(det.height, det.width, metric.n_patches, metric.patch_size, rng)
    candidates = [iso] + [sample_pose(iso, sampler, rng) for _ in range(n)]
    best_pose, best_score = None, -np.inf
    for T in candidates:
        img = render(vol, T, det, patches)
        score = _score_candidate(metric, fixed, img, patches)
        if score > best_score:
            best_pose, best_score = T, score
    return best_pose


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def step_adam(
    state: AdamState,
    params: np.ndarray,
    grads: np.ndarray,
    iteration: int,
    cfg: OptimConfig,
    rot_dim: int | None = None,
) -> tuple[AdamState, np.ndarray]:
    """One Adam descent step with per-group learning rates and step decay.

    The first rot_dim entries use lr_rot, the final 3 use lr_trans, both
    scaled by decay^(iteration // decay_every). grads is the gradient of the
    loss being minimized.
    """
    grads = np.asarray(grads, dtype=float)
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError(f"non-finite gradient at iteration {iteration}: {grads}")
    if rot_dim is None:
        rot_dim = params.size - 3
    lr = np.empty(params.size)
    lr[:rot_dim] = cfg.lr_rot
    lr[rot_dim:] = cfg.lr_trans
    lr *= cfg.decay ** (iteration // cfg.decay_every)

    state.count += 1
    state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * grads
    state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * grads**2
    m_hat = state.m / (1 - cfg.beta1**state.count)
    v_hat = state.v / (1 - cfg.beta2**state.count)
    return state, params - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


class EarlyStopper:
    """Stops once the running best fails to improve by min_improve for
    patience consecutive iterations."""

    def __init__(self, min_improve: float, patience: int):
        self.min_improve = min_improve
        self.patience = patience
        self.best = -np.inf
        self.stall = 0

    def update(self, similarity: float) -> bool:
        if similarity - self.best >= self.min_improve:
            self.stall = 0
        else:
            self.stall += 1
        if similarity > self.best:
            self.best = similarity
        return self.stall >= self.patience


def _param_chain_factor(params: np.ndarray, kind: str, T: Pose) -> np.ndarray:
    """d(left se(3) perturbation)/d(parameters), a 6 x (d+3) matrix.

    Column j is the central difference of log(T(p + h e_j) T(p)^-1) in h.
    """
    T_inv = inverse(T)
    J = np.zeros((6, params.size))
    h = _CHAIN_FD_STEP
    for j in range(params.size):
        e = np.zeros(params.size)
        e[j] = h
        Tp = param_to_pose(PoseParam(kind, params + e))
        Tm = param_to_pose(PoseParam(kind, params - e))
        J[:, j] = (log_se3(compose(Tp, T_inv)) - log_se3(compose(Tm, T_inv))) / (2 * h)
    return J


def _canonicalize(params: np.ndarray, kind: str) -> np.ndarray:
    if kind == "quaternion":
        q = params[:4]
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise FloatingPointError("quaternion collapsed to zero during optimization")
        params = params.copy()
        params[:4] = q / norm
    return params


def register(
    fixed,
    vol: Volume,
    det: Detector,
    init: Pose,
    ocfg: OptimConfig,
    mcfg: MetricConfig,
    rng: np.random.Generator,
) -> tuple[Pose, Trajectory]:
    """Refine init by maximizing image similarity with Adam.

    Returns the best-scoring pose seen (not the final iterate) and the full
    iteration trajectory. Sparse metrics resample patch centers every
    iteration from a per-(run, iteration) seed. Raises DegenerateInputError
    if the metric is degenerate at the initial pose.
    """
    fixed = fixed.pixels if isinstance(fixed, Image) else np.asarray(fixed, dtype=float)
    kind = ocfg.param_kind
    params = pose_to_param(init, kind).values.copy()
    rot_dim = PoseParam(kind, params).rot_dim
    state = AdamState.zeros(params.size)
    stopper = EarlyStopper(ocfg.min_improve, ocfg.patience)
    run_key = int(rng.integers(np.iinfo(np.int64).max))

    best_pose = init
    best_sim = -np.inf
    traj = Trajectory()
    for it in range(ocfg.max_iters):
        t0 = time.perf_counter()
        T = param_to_pose(PoseParam(kind, params))
        patches = None
        if mcfg.kind == "sparse_mncc":
            prng = np.random.default_rng([run_key, it])
            patches = sample_patch_centers(det.height, det.width, mcfg.n_patches, mcfg.patch_size, prng)
        img, jac = render_with_jacobian(vol, T, det, patches)
        try:
            sim, dpix = evaluate_grad(mcfg, fixed, img, patches)
        except DegenerateInputError:
            if it == 0:
                raise DegenerateInputError(
                    "similarity is degenerate at the initial pose (flat render); re-initialize"
                ) from None
            warnings.warn(f"degenerate render at iteration {it}; scored 0")
            sim, dpix = 0.0, np.zeros_like(fixed)

        dsim_deps = np.einsum("hw,hwk->k", dpix, jac)
        grad_loss = -(_param_chain_factor(params, kind, T).T @ dsim_deps)

        if sim > best_sim:
            best_sim = sim
            best_pose = T
        stop = stopper.update(sim)
        traj.append(
            TrajectoryRow(
                iteration=it,
                pose=T,
                similarity=float(sim),
                grad_norm=float(np.linalg.norm(grad_loss)),
                millis=1000 * (time.perf_counter() - t0),
            )
        )
        if stop:
            break
        state, params = step_adam(state, params, grad_loss, it, ocfg, rot_dim)
        params = _canonicalize(params, kind)

    return best_pose, traj
