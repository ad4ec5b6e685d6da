"""Straight-flow filtering: coupled velocity nets, distance scaling, Euler integration."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import DEFAULT_PATCH_K, KnnIndex, Patch, as_cloud, covering_seeds, patch_owners, stitch_cloud


@dataclass(frozen=True)
class FilterConfig:
    K: int = 2
    N: int = 3
    repeats: int = 1
    patch_k: int = DEFAULT_PATCH_K

    def __post_init__(self):
        if self.K < 1 or self.N < 1 or self.repeats < 1:
            raise ValueError(f"K, N and repeats must all be >= 1 (got {self.K}, {self.N}, {self.repeats})")
        if self.patch_k < 1:
            raise ValueError("patch_k must be >= 1")

    @property
    def T(self) -> int:
        return self.K * self.N


@dataclass
class VelocityStack:
    modules: list[nn.Net]

    def __post_init__(self):
        if not self.modules:
            raise ValueError("a velocity stack needs at least one module")
        self.modules = list(self.modules)

    @property
    def K(self) -> int:
        return len(self.modules)

    def copy(self) -> VelocityStack:
        return VelocityStack([m.copy() for m in self.modules])


@dataclass
class Trajectory:
    """Patch states in the normalized frame: the initial state, then one per sub-step."""

    states: list[np.ndarray]
    step_times: list[float]
    distances: list[float] = field(default_factory=list)


def interpolate(x0, x1, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    # exact at both endpoints and wherever x0 == x1
    return np.where(x0 == x1, x0, (1.0 - t) * x0 + t * x1)


def velocity_forward(net: nn.Net, state) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise ValueError("state contains non-finite values")
    return nn.forward(net, state)[0]


def distance_forward(net: nn.Net | None, state) -> float:
    """Scalar in (0, 1) estimating how far ``state`` is from the clean surface.

    ``None`` stands for the unscaled integrator (d = 1).
    """
    if net is None:
        return 1.0
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise ValueError("state contains non-finite values")
    return float(nn.forward(net, state)[0][0, 0])


def coupled_step(stack: VelocityStack, state, k: int, T: int, d: float) -> np.ndarray:
    if not 0 <= k < stack.K:
        raise ValueError(f"module index {k} outside [0, {stack.K})")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < d <= 1.0:
        raise ValueError(f"distance scale {d} outside (0, 1]")
    return state + (d / T) * velocity_forward(stack.modules[k], state)


def integrate(stack: VelocityStack, dm: nn.Net | None, x, config: FilterConfig) -> Trajectory:
    """Run ``repeats`` passes of N rounds through the K modules, starting at ``x``."""
    if stack.K != config.K:
        raise ValueError(f"stack has {stack.K} modules but config.K = {config.K}")
    T = config.T
    state = np.asarray(x, dtype=np.float64)
    states, times, dists = [state], [0.0], []
    for r in range(config.repeats):
        # one distance estimate per pass, taken on the pass's entry state
        d = distance_forward(dm, state)
        dists.append(d)
        for n in range(config.N):
            for k in range(config.K):
                state = coupled_step(stack, state, k, T, d)
                states.append(state)
                times.append(r + (n * config.K + k + 1) / T)
    return Trajectory(states, times, dists)


def filter_patch(stack: VelocityStack, dm: nn.Net | None, patch: Patch, config: FilterConfig):
    """Filter one patch; returns (filtered patch, trajectory)."""
    traj = integrate(stack, dm, patch.points, config)
    return patch.with_points(traj.states[-1]), traj


def summed_update(stack: VelocityStack, dm: nn.Net | None, traj: Trajectory, config: FilterConfig) -> np.ndarray:
    """Full-update form: initial state plus every scaled sub-step velocity.

    Velocities and distance scales are re-evaluated from the recorded states
    rather than reused from the sequential run.
    """
    T = config.T
    total = np.zeros_like(traj.states[0])
    for r in range(config.repeats):
        base = r * T
        d = distance_forward(dm, traj.states[base])
        acc = np.zeros_like(total)
        for s in range(T):
            acc += velocity_forward(stack.modules[s % config.K], traj.states[base + s])
        total += (d / T) * acc
    return traj.states[0] + total


def straightness(traj: Trajectory | list, eps: float = 1e-12) -> float:
    """Mean over points of path length / end-to-end distance (1 = straight)."""
    states = traj.states if isinstance(traj, Trajectory) else traj
    if len(states) < 2:
        raise ValueError("a trajectory needs at least two states")
    s = np.stack([np.asarray(x, dtype=np.float64) for x in states])
    path = np.linalg.norm(np.diff(s, axis=0), axis=2).sum(axis=0)
    chord = np.linalg.norm(s[-1] - s[0], axis=1)
    keep = chord > eps
    if not keep.any():
        raise ValueError("degenerate trajectory: no point moved")
    return float((path[keep] / chord[keep]).mean())


@dataclass
class CloudResult:
    points: np.ndarray
    seeds: np.ndarray
    patches: list[Patch]
    trajectories: list[Trajectory]

    def point_trajectories(self, cloud) -> np.ndarray:
        """World-frame trajectory of every point, shaped (steps, n, 3)."""
        owner, slot = patch_owners(cloud, self.seeds, self.patches)
        steps = len(self.trajectories[0].states)
        out = np.empty((steps, len(owner), 3))
        for j, (p, tr) in enumerate(zip(self.patches, self.trajectories)):
            rows = np.flatnonzero(owner == j)
            if rows.size:
                for s, st in enumerate(tr.states):
                    out[s, rows] = p.denormalize(st[slot[rows]])
        return out


def filter_cloud_full(stack, dm, cloud, config: FilterConfig, workers: int = 1) -> CloudResult:
    pts = as_cloud(cloud)
    if len(pts) < config.patch_k:
        raise ValueError(f"cloud has {len(pts)} points, fewer than patch_k={config.patch_k}")
    seeds, patches = covering_seeds(pts, config.patch_k, KnnIndex(pts))

    def run(p):
        return filter_patch(stack, dm, p, config)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, patches))
    else:
        results = [run(p) for p in patches]
    filtered = [r[0] for r in results]
    return CloudResult(
        points=stitch_cloud(pts, seeds, filtered),
        seeds=seeds,
        patches=filtered,
        trajectories=[r[1] for r in results],
    )


def filter_cloud(stack, dm, cloud, config: FilterConfig, workers: int = 1) -> np.ndarray:
    """Denoise a whole cloud; output keeps the input's point order and count."""
    return filter_cloud_full(stack, dm, cloud, config, workers).points


@dataclass
class FlowModel:
    """Velocity stack plus optional distance net and the integration defaults."""

    stack: VelocityStack
    distance: nn.Net | None = None
    N: int = 3
    patch_k: int = DEFAULT_PATCH_K

    @property
    def K(self) -> int:
        return self.stack.K

    def filter_config(self, repeats: int = 1, N: int | None = None, patch_k: int | None = None) -> FilterConfig:
        return FilterConfig(self.K, N or self.N, repeats, patch_k or self.patch_k)

    def nets(self) -> dict[str, nn.Net]:
        out = {f"velocity{i}": m for i, m in enumerate(self.stack.modules)}
        if self.distance is not None:
            out["distance"] = self.distance
        return out

    def param_count(self) -> int:
        return nn.count_params(*self.nets().values())

    def copy(self) -> FlowModel:
        dm = self.distance.copy() if self.distance is not None else None
        return FlowModel(self.stack.copy(), dm, self.N, self.patch_k)

    def equal(self, other: FlowModel) -> bool:
        a, b = self.nets(), other.nets()
        return (
            list(a) == list(b)
            and all(a[k].specs == b[k].specs and a[k].params.equal(b[k].params) for k in a)
            and (self.N, self.patch_k) == (other.N, other.patch_k)
        )

    def save(self, path) -> None:
        nn.save_model(path, self.nets(), self.K, self.N, self.patch_k)

    @classmethod
    def load(cls, path) -> FlowModel:
        nets, meta = nn.load_model(path)
        vms = [nets[f"velocity{i}"] for i in range(meta["K"]) if f"velocity{i}" in nets]
        if len(vms) != meta["K"]:
            raise nn.ModelFileError(f"model declares K={meta['K']} but holds {len(vms)} velocity nets")
        return cls(VelocityStack(vms), nets.get("distance"), meta["N"], meta["patch_k"])

    @classmethod
    def zeros(cls, K: int = 2, N: int = 3, patch_k: int = DEFAULT_PATCH_K, with_distance: bool = True) -> FlowModel:
        stack = VelocityStack([nn.zero_net(nn.VELOCITY_SPECS) for _ in range(K)])
        dm = nn.zero_net(nn.DISTANCE_SPECS) if with_distance else None
        return cls(stack, dm, N, patch_k)
