"""Chamfer distance, analytic point-to-surface error and noise generators."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import KnnIndex, as_cloud, bounding_sphere

NOISE_KINDS = ("gaussian", "aniso_gaussian", "laplace", "uniform_sphere")

# covariance shape of the anisotropic noise, in units of scale**2
ANISO_COV = np.array(
    [[1.0, -0.5, -0.25],
     [-0.5, 1.0, -0.25],
     [-0.25, -0.25, 1.0]]
)


def _sym_sqrt(m):
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(w)) @ v.T


ANISO_FACTOR = _sym_sqrt(ANISO_COV)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    scale: float = 0.01

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not self.scale >= 0:
            raise ValueError("noise scale must be >= 0")

    @classmethod
    def parse(cls, text: str) -> NoiseSpec:
        """Parse ``kind:scale``, e.g. ``gaussian:0.01``."""
        kind, sep, scale = text.partition(":")
        if not sep:
            raise ValueError(f"noise must look like kind:scale, got {text!r}")
        return cls(kind, float(scale))


def gen_noise(spec: NoiseSpec, n: int, bounding_radius: float, rng: np.random.Generator) -> np.ndarray:
    """Per-point offsets with scale ``s = spec.scale * bounding_radius``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    s = spec.scale * bounding_radius
    if spec.kind == "gaussian":
        return s * rng.standard_normal((n, 3))
    if spec.kind == "aniso_gaussian":
        return s * rng.standard_normal((n, 3)) @ ANISO_FACTOR
    if spec.kind == "laplace":
        return rng.laplace(0.0, s, size=(n, 3)) if s > 0 else np.zeros((n, 3))
    # uniform in a ball: random direction, radius by inverse CDF u**(1/3)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (s * rng.uniform(size=(n, 1)) ** (1.0 / 3.0))


def add_noise(cloud, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    pts = as_cloud(cloud)
    return pts + gen_noise(spec, len(pts), bounding_sphere(pts).radius, rng)


@dataclass(frozen=True)
class SurfaceSpec:
    kind: str
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0
    major: float = 1.0
    minor: float = 0.4
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if self.kind not in ("sphere", "torus", "plane"):
            raise ValueError(f"unknown surface kind {self.kind!r}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        nrm = np.asarray(self.normal, dtype=np.float64)
        if self.kind == "sphere" and self.radius <= 0:
            raise ValueError("sphere radius must be > 0")
        if self.kind == "torus" and not (self.minor > 0 and self.major > self.minor):
            raise ValueError("torus needs major > minor > 0")
        if self.kind == "plane":
            length = np.linalg.norm(nrm)
            if length == 0:
                raise ValueError("plane normal must be non-zero")
            nrm = nrm / length
        object.__setattr__(self, "normal", nrm)

    def distance(self, points) -> np.ndarray:
        """Unsigned distance of each point to the surface."""
        p = np.asarray(points, dtype=np.float64) - self.center
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(p, axis=1) - self.radius)
        if self.kind == "torus":
            ring = np.hypot(p[:, 0], p[:, 1]) - self.major
            return np.abs(np.hypot(ring, p[:, 2]) - self.minor)
        return np.abs(p @ self.normal)

    @classmethod
    def parse(cls, text: str) -> SurfaceSpec:
        """``sphere:cx,cy,cz,r`` | ``torus:cx,cy,cz,R,r`` | ``plane:px,py,pz,nx,ny,nz``."""
        kind, _, rest = text.partition(":")
        vals = [float(v) for v in rest.split(",")] if rest else []
        want = {"sphere": 4, "torus": 5, "plane": 6}.get(kind)
        if want is None or len(vals) != want:
            raise ValueError(f"cannot parse surface {text!r}")
        if kind == "sphere":
            return cls("sphere", center=vals[:3], radius=vals[3])
        if kind == "torus":
            return cls("torus", center=vals[:3], major=vals[3], minor=vals[4])
        return cls("plane", center=vals[:3], normal=vals[3:])


def _scale_for(reference) -> tuple[np.ndarray, float]:
    if reference is None:
        return np.zeros(3), 1.0
    bs = bounding_sphere(reference)
    return bs.center, (bs.radius if bs.radius > 0 else 1.0)


def chamfer(a, b, reference=None) -> float:
    """Sum of the two directional mean squared nearest-neighbour distances.

    With ``reference`` (normally the clean cloud) both inputs are first mapped
    into that cloud's unit bounding sphere.
    """
    a, b = as_cloud(a), as_cloud(b)
    c, r = _scale_for(reference)
    a, b = (a - c) / r, (b - c) / r
    ab = KnnIndex(b).query(a, 1)[:, 0]
    ba = KnnIndex(a).query(b, 1)[:, 0]
    return float(((a - b[ab]) ** 2).sum(axis=1).mean() + ((b - a[ba]) ** 2).sum(axis=1).mean())


def point_to_surface(points, surface: SurfaceSpec, reference=None) -> float:
    """Mean squared analytic distance to ``surface`` (the ``p2s`` metric)."""
    pts = as_cloud(points)
    _, r = _scale_for(reference)
    return float(((surface.distance(pts) / r) ** 2).mean())
