"""Procedural clean shapes for training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import SurfaceSpec

SHAPE_KINDS = ("sphere", "torus", "plane_patch", "icosahedron_surface")


@dataclass(frozen=True)
class ShapeSpec:
    """Shape kind, size parameters and point count.

    Size parameters per kind: sphere ``radius``; torus ``major``/``minor``;
    plane_patch ``width``/``height``; icosahedron_surface ``edge``.
    All shapes may be moved by ``center``.
    """

    kind: str
    n: int = 2048
    params: dict = field(default_factory=dict)
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.n < 64:
            raise ValueError("shapes need n >= 64 points")
        p = {**DEFAULT_PARAMS[self.kind], **self.params}
        object.__setattr__(self, "params", p)
        if any(v <= 0 for v in p.values()):
            raise ValueError(f"size parameters must be positive: {p}")
        if self.kind == "torus" and not p["major"] > p["minor"]:
            raise ValueError("torus needs major radius > minor radius")


DEFAULT_PARAMS = {
    "sphere": {"radius": 1.0},
    "torus": {"major": 1.0, "minor": 0.4},
    "plane_patch": {"width": 2.0, "height": 2.0},
    "icosahedron_surface": {"edge": 1.0},
}


def _sphere(spec, rng):
    d = rng.standard_normal((spec.n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * spec.params["radius"]


def _torus(spec, rng):
    big, small = spec.params["major"], spec.params["minor"]
    out = []
    got = 0
    while got < spec.n:
        m = 2 * (spec.n - got) + 16
        theta = rng.uniform(0, 2 * np.pi, m)
        phi = rng.uniform(0, 2 * np.pi, m)
        # area element is proportional to R + r cos(theta)
        keep = rng.uniform(0, big + small, m) < big + small * np.cos(theta)
        theta, phi = theta[keep], phi[keep]
        ring = big + small * np.cos(theta)
        pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), small * np.sin(theta)], axis=1)
        out.append(pts)
        got += len(pts)
    return np.concatenate(out)[: spec.n]


def _plane(spec, rng):
    w, h = spec.params["width"], spec.params["height"]
    xy = rng.uniform([-w / 2, -h / 2], [w / 2, h / 2], size=(spec.n, 2))
    return np.column_stack([xy, np.zeros(spec.n)])


def icosahedron(edge=1.0):
    """Vertices and triangular faces of a regular icosahedron centred at the origin."""
    g = (1 + 5**0.5) / 2
    v = np.array(
        [[-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0],
         [0, -1, g], [0, 1, g], [0, -1, -g], [0, 1, -g],
         [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1]],
        dtype=np.float64,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    return v * (edge / 2.0), f


def _icosahedron(spec, rng):
    v, f = icosahedron(spec.params["edge"])
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    tri = rng.choice(len(f), size=spec.n, p=area / area.sum())
    u = rng.uniform(size=(spec.n, 2))
    # fold the unit square onto the triangle
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    return a[tri] + u[:, :1] * (b[tri] - a[tri]) + u[:, 1:] * (c[tri] - a[tri])


_SAMPLERS = {
    "sphere": _sphere,
    "torus": _torus,
    "plane_patch": _plane,
    "icosahedron_surface": _icosahedron,
}


def surface_of(spec: ShapeSpec) -> SurfaceSpec | None:
    c = np.asarray(spec.center, dtype=np.float64)
    if spec.kind == "sphere":
        return SurfaceSpec("sphere", center=c, radius=spec.params["radius"])
    if spec.kind == "torus":
        return SurfaceSpec("torus", center=c, major=spec.params["major"], minor=spec.params["minor"])
    if spec.kind == "plane_patch":
        return SurfaceSpec("plane", center=c, normal=np.array([0.0, 0.0, 1.0]))
    return None


def sample_shape(spec: ShapeSpec, rng: np.random.Generator):
    """Area-uniform samples of ``spec``; returns (points, SurfaceSpec or None)."""
    pts = _SAMPLERS[spec.kind](spec, rng) + np.asarray(spec.center, dtype=np.float64)
    return pts, surface_of(spec)


def training_shapes(n: int = 2048) -> list[ShapeSpec]:
    return [
        ShapeSpec("sphere", n, {"radius": 1.0}),
        ShapeSpec("torus", n, {"major": 1.0, "minor": 0.4}),
        ShapeSpec("plane_patch", n, {"width": 2.0, "height": 2.0}),
        ShapeSpec("icosahedron_surface", n, {"edge": 1.0}),
    ]


def eval_shapes(n: int = 2000) -> list[ShapeSpec]:
    """Same kinds as the training set with perturbed sizes and offsets."""
    return [
        ShapeSpec("sphere", n, {"radius": 1.3}, center=(0.2, -0.1, 0.3)),
        ShapeSpec("torus", n, {"major": 1.2, "minor": 0.45}, center=(-0.3, 0.1, 0.0)),
        ShapeSpec("plane_patch", n, {"width": 2.5, "height": 1.8}, center=(0.0, 0.4, -0.2)),
        ShapeSpec("icosahedron_surface", n, {"edge": 1.2}, center=(0.1, 0.1, 0.1)),
    ]


def training_clouds(seed: int = 0, n: int = 2048) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [sample_shape(s, rng)[0] for s in training_shapes(n)]
