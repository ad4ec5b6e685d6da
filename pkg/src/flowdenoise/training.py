"""Sample synthesis, the three training losses and the staged optimizer loop.

Stage A pretrains one velocity net, stage B finetunes K coupled copies of it,
stage C trains the distance net against the frozen stack.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .flow import FilterConfig, FlowModel, VelocityStack, interpolate
from .geometry import KnnIndex, Patch, as_cloud, bounding_sphere, extract_patch
from .metrics import NoiseSpec, gen_noise

STAGES = ("A", "B", "C")
DEFAULT_STEPS = {"A": 3000, "B": 2000, "C": 1500}


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 10.0
    lambda2: float = 200.0
    sigma_H: float = 0.02
    # "interval": coupled step over t_{k+1} - t_k = (1 - t) / K
    # "uniform": fixed 1 / K step
    coupling_step: str = "interval"

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ValueError("lambda1 and lambda2 must be > 0")
        if not 0 < self.sigma_H <= 0.1:
            raise ValueError("sigma_H must lie in (0, 0.1]")
        if self.coupling_step not in ("interval", "uniform"):
            raise ValueError(f"unknown coupling_step {self.coupling_step!r}")


@dataclass
class TrainingSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    xt: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.x1 - self.x0


def synth_sample(clean_patch: Patch, cfg: LossConfig, rng: np.random.Generator,
                 cloud_radius: float, noise_kind: str = "gaussian", sigma: float | None = None,
                 t: float | None = None) -> TrainingSample:
    """High-noise/clean pair for a clean patch, plus an interpolated state.

    The noise level ``sigma`` (default ``cfg.sigma_H``) is a fraction of the
    whole cloud's bounding radius, re-expressed in the patch frame.
    """
    sigma = cfg.sigma_H if sigma is None else sigma
    x1 = clean_patch.points.copy()
    noise = gen_noise(NoiseSpec(noise_kind, sigma), len(x1), cloud_radius / clean_patch.scale, rng)
    x0 = x1 + noise
    if t is None:
        t = float(rng.uniform())
    return TrainingSample(x0=x0, x1=x1, t=t, xt=interpolate(x0, x1, t))


def _msq(a):
    # mean over points of squared point norms
    return float((a * a).sum() / a.shape[0])


def _msq_grad(a):
    return 2.0 * a / a.shape[0]


def _is_net(v):
    return isinstance(v, nn.Net)


def _velocity(vm, x):
    """Network forward with cache, or a plain callable (no gradients)."""
    if _is_net(vm):
        return nn.forward(vm, x)
    return np.asarray(vm(x), dtype=np.float64), None


def loss_A(vm, sample: TrainingSample):
    """Mean squared error between predicted velocity and X1 - X0.

    ``vm`` may be a Net (returns gradients) or a callable (gradients None).
    """
    v, cache = _velocity(vm, sample.xt)
    r = v - sample.delta
    loss = _msq(r)
    if cache is None:
        return loss, None
    grads, _ = nn.backward(vm, cache, _msq_grad(r))
    return loss, grads


def coupling_times(t: float, K: int) -> list[float]:
    return [(t * (K - k) + k) / K for k in range(K + 1)]


def loss_B(stack, sample: TrainingSample, cfg: LossConfig, return_terms: bool = False):
    """Coupled-stack loss: per-module velocity error plus lambda1 times the
    drift of the chained states from the interpolation line.

    ``stack`` is a VelocityStack or a list of nets/callables. Gradients flow
    through the whole unrolled chain; returns (loss, per-module grads).
    """
    modules = stack.modules if isinstance(stack, VelocityStack) else list(stack)
    K = len(modules)
    if K < 1:
        raise TrainingError("loss_B needs at least one module")
    t = sample.t
    times = coupling_times(t, K)
    step = (1.0 - t) / K if cfg.coupling_step == "interval" else 1.0 / K
    delta = sample.delta
    xs, vs, caches, drift = [sample.xt], [], [], [None]
    term1 = term2 = 0.0
    for k in range(K):
        v, c = _velocity(modules[k], xs[k])
        vs.append(v)
        caches.append(c)
        term1 += _msq(v - delta)
        if k < K - 1:
            nxt = xs[k] + step * v
            r = nxt - interpolate(sample.x0, sample.x1, times[k + 1])
            term2 += _msq(r)
            xs.append(nxt)
            drift.append(r)
    loss = term1 + cfg.lambda1 * term2
    terms = (term1, term2)
    if any(c is None for c in caches):
        return (loss, None, terms) if return_terms else (loss, None)

    grads = [None] * K
    g_next = None  # dL/dx_{k+1}
    for k in range(K - 1, -1, -1):
        dv = _msq_grad(vs[k] - delta)
        if g_next is not None:
            dv = dv + step * g_next
        grads[k], dx = nn.backward(modules[k], caches[k], dv)
        if k == 0:
            break
        g = dx + cfg.lambda1 * _msq_grad(drift[k])
        if g_next is not None:
            g = g + g_next
        g_next = g
    return (loss, grads, terms) if return_terms else (loss, grads)


def distance_target(sample: TrainingSample) -> float:
    den = np.linalg.norm(sample.x1 - sample.x0)
    if den == 0.0:
        raise TrainingError("degenerate sample: X0 equals X1")
    return float(np.linalg.norm(sample.x1 - sample.xt) / den)


def loss_C(stack: VelocityStack, dm: nn.Net, sample: TrainingSample, cfg: LossConfig,
           filter_cfg: FilterConfig, return_terms: bool = False):
    """Distance-net loss: (d - relative distance)^2 + lambda2 * landing error.

    The landing point comes from one integrator pass (K modules, N rounds)
    scaled by d; gradients go to the distance net only.
    """
    target = distance_target(sample)
    out, dcache = nn.forward(dm, sample.xt)
    d = float(out[0, 0])
    K, T = stack.K, filter_cfg.K * filter_cfg.N
    if K != filter_cfg.K:
        raise TrainingError(f"stack has {K} modules but filter config K = {filter_cfg.K}")
    state = sample.xt
    vs, caches = [], []
    for s in range(T):
        v, c = nn.forward(stack.modules[s % K], state)
        vs.append(v)
        caches.append(c)
        state = state + (d / T) * v
    land = state - sample.x1
    term1 = (d - target) ** 2
    term2 = _msq(land)
    loss = term1 + cfg.lambda2 * term2

    g = cfg.lambda2 * _msq_grad(land)
    dd = 0.0
    for s in range(T - 1, -1, -1):
        dd += float((vs[s] * g).sum()) / T
        _, dx = nn.backward(stack.modules[s % K], caches[s], (d / T) * g, need_params=False)
        g = g + dx
    dd += 2.0 * (d - target)
    grads, _ = nn.backward(dm, dcache, np.array([[dd]]))
    return (loss, grads, (term1, term2)) if return_terms else (loss, grads)


# ---------------------------------------------------------------------------
# stage loop


class PatchSampler:
    """Random clean patches from a fixed set of clean clouds."""

    def __init__(self, clouds, patch_k: int):
        self.clouds = [as_cloud(c) for c in clouds]
        if not self.clouds:
            raise TrainingError("training needs at least one clean cloud")
        for c in self.clouds:
            if len(c) < patch_k:
                raise TrainingError(f"cloud of {len(c)} points is smaller than patch_k={patch_k}")
        self.patch_k = patch_k
        self.indexes = [KnnIndex(c) for c in self.clouds]
        self.radii = [bounding_sphere(c).radius for c in self.clouds]

    def draw(self, rng: np.random.Generator):
        i = int(rng.integers(len(self.clouds)))
        ref = int(rng.integers(len(self.clouds[i])))
        return extract_patch(self.clouds[i], ref, self.patch_k, self.indexes[i]), self.radii[i]


@dataclass
class StageReport:
    stage: str
    losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    seed: int = 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def smoothed(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return np.array([x.mean()]) if len(x) else x
        c = np.cumsum(np.insert(x, 0, 0.0))
        return (c[window:] - c[:-window]) / window

    def write_csv(self, path) -> None:
        lines = ["step,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(self.losses)]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class TrainConfig:
    steps: int | None = None
    seed: int = 0
    lr: float = 1e-4
    loss: LossConfig = LossConfig()
    filter: FilterConfig = FilterConfig()


def _rngs(seed: int, stage: str):
    ss = np.random.SeedSequence([seed, STAGES.index(stage)])
    init, data = ss.spawn(2)
    return np.random.default_rng(init), np.random.default_rng(data)


def train_stage(stage: str, clouds, cfg: TrainConfig, model: FlowModel | None = None,
                log_every: int = 0, log=print):
    """Run one training stage; returns (model, StageReport).

    Stage A starts from fresh weights; B needs a stage-A (or B) model and
    replicates a single module K times; C needs the coupled stack and only
    trains the distance net. The input model is never modified.
    """
    if stage not in STAGES:
        raise TrainingError(f"unknown stage {stage!r}")
    steps = DEFAULT_STEPS[stage] if cfg.steps is None else cfg.steps
    fc = cfg.filter
    init_rng, rng = _rngs(cfg.seed, stage)
    if stage == "A":
        model = FlowModel(VelocityStack([nn.init_net(nn.VELOCITY_SPECS, init_rng)]), None, fc.N, fc.patch_k)
    elif model is None:
        raise TrainingError("stage B requires stage-A weights" if stage == "B" else "stage C requires stage-B weights")
    else:
        model = model.copy()
        model.N, model.patch_k = fc.N, fc.patch_k
    if stage == "B":
        if model.K == 1 and fc.K > 1:
            model.stack = VelocityStack([model.stack.modules[0].copy() for _ in range(fc.K)])
        elif model.K != fc.K:
            raise TrainingError(f"stage B got {model.K} modules, expected 1 or {fc.K}")
    if stage == "C":
        if model.K != fc.K:
            raise TrainingError(f"stage C requires stage-B weights with K={fc.K}, got K={model.K}")
        if model.distance is None:
            model.distance = nn.init_net(nn.DISTANCE_SPECS, init_rng)

    if stage == "C":
        trained = [model.distance]
    else:
        trained = list(model.stack.modules)
    states = [nn.AdamState.for_params(net.params, lr=cfg.lr) for net in trained]
    sampler = PatchSampler(clouds, fc.patch_k)
    report = StageReport(stage, seed=cfg.seed)
    start = time.perf_counter()
    for it in range(steps):
        patch, radius = sampler.draw(rng)
        sample = synth_sample(patch, cfg.loss, rng, radius)
        if stage == "A":
            loss, g = loss_A(trained[0], sample)
            grads = [g]
        elif stage == "B":
            loss, grads = loss_B(model.stack, sample, cfg.loss)
        else:
            loss, g = loss_C(model.stack, model.distance, sample, cfg.loss, fc)
            grads = [g]
        for net, g, st in zip(trained, grads, states):
            nn.adam_step(net.params, g, st)
        report.losses.append(loss)
        if log_every and (it + 1) % log_every == 0:
            recent = np.mean(report.losses[-log_every:])
            log(f"stage {stage} step {it + 1}/{steps} loss {recent:.6g}")
    report.wall_time = time.perf_counter() - start
    return model, report


def train_all(clouds, cfg: TrainConfig, steps: dict | None = None, log_every: int = 0, log=print):
    """Stages A, B and C back to back; returns (model, {stage: report})."""
    steps = {**DEFAULT_STEPS, **(steps or {})}
    reports = {}
    model = None
    for stage in STAGES:
        stage_cfg = TrainConfig(steps[stage], cfg.seed, cfg.lr, cfg.loss, cfg.filter)
        model, reports[stage] = train_stage(stage, clouds, stage_cfg, model, log_every, log)
    return model, reports
