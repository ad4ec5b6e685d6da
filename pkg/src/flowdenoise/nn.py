"""Small graph-network substrate: layers, reverse-mode gradients, Adam, model files.

Everything is float64 numpy. A network is a list of :class:`LayerSpec` plus a
:class:`ParamStore`; :func:`forward` returns the output and a cache that
:func:`backward` consumes to produce parameter and input cotangents.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import KnnIndex

KINDS = ("edgeconv", "pointwise_mlp", "global_max_pool", "sigmoid_head")
KIND_CODES = {kind: i for i, kind in enumerate(KINDS)}


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_width: int
    out_width: int
    graph_k: int = 0

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_width < 1 or self.out_width < 1:
            raise ValueError("layer widths must be >= 1")
        if self.kind == "edgeconv" and self.graph_k < 1:
            raise ValueError("edgeconv needs graph_k >= 1")
        if self.kind == "global_max_pool" and self.in_width != self.out_width:
            raise ValueError("global_max_pool keeps the feature width")


def edgeconv(c_in, c_out, graph_k=16):
    return LayerSpec("edgeconv", c_in, c_out, graph_k)


def mlp(c_in, c_out):
    return LayerSpec("pointwise_mlp", c_in, c_out)


def max_pool(c):
    return LayerSpec("global_max_pool", c, c)


def sigmoid_head(c_in):
    return LayerSpec("sigmoid_head", c_in, 1)


# VelocityNet and DistanceNet defaults
VELOCITY_SPECS = (edgeconv(3, 32), edgeconv(32, 64), mlp(64, 64), mlp(64, 3))
DISTANCE_SPECS = (edgeconv(3, 32), mlp(32, 64), max_pool(64), sigmoid_head(64))


def layer_param_shapes(spec: LayerSpec) -> list[tuple[str, tuple[int, ...]]]:
    c, o = spec.in_width, spec.out_width
    if spec.kind == "edgeconv":
        return [("w1", (2 * c, o)), ("b1", (o,)), ("w2", (o, o)), ("b2", (o,))]
    if spec.kind in ("pointwise_mlp", "sigmoid_head"):
        return [("w", (c, o)), ("b", (o,))]
    return []


def param_shapes(specs) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for i, spec in enumerate(specs):
        out += [(f"{i}.{name}", shape) for name, shape in layer_param_shapes(spec)]
    return out


class ParamStore:
    """Named float64 arrays with fixed shapes and insertion order."""

    def __init__(self, arrays=None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> None:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter {name!r}")
        self._arrays[name] = np.array(arr, dtype=np.float64)

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != self._arrays[name].shape:
            raise ShapeError(f"{name}: shape {arr.shape} != {self._arrays[name].shape}")
        self._arrays[name] = arr.copy()

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list[str]:
        return list(self._arrays)

    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def copy(self) -> ParamStore:
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def zeros_like(self) -> ParamStore:
        return ParamStore({k: np.zeros_like(v) for k, v in self._arrays.items()})

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def add_(self, other: ParamStore, scale: float = 1.0) -> ParamStore:
        for k, v in other.items():
            self._arrays[k] += scale * v
        return self

    def equal(self, other: ParamStore) -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.shape == other[k].shape and a.tobytes() == other[k].tobytes()
            for k, a in self.items()
        )


@dataclass
class Net:
    specs: tuple[LayerSpec, ...]
    params: ParamStore

    def __post_init__(self):
        self.specs = tuple(self.specs)
        expected = param_shapes(self.specs)
        got = [(k, v.shape) for k, v in self.params.items()]
        if got != expected:
            raise ShapeError(f"parameters {got} do not match layer specs {expected}")
        if self.specs and self.specs[0].in_width != 3:
            raise ShapeError("first layer must consume 3-wide positions")
        for a, b in zip(self.specs, self.specs[1:]):
            if a.out_width != b.in_width:
                raise ShapeError(f"width mismatch {a} -> {b}")

    def copy(self) -> Net:
        return Net(self.specs, self.params.copy())

    @property
    def max_graph_k(self) -> int:
        return max((s.graph_k for s in self.specs if s.kind == "edgeconv"), default=0)


def init_net(specs, rng: np.random.Generator) -> Net:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases zero."""
    params = ParamStore()
    for name, shape in param_shapes(specs):
        if len(shape) == 2:
            bound = np.sqrt(1.0 / shape[0])
            params.add(name, rng.uniform(-bound, bound, size=shape))
        else:
            params.add(name, np.zeros(shape))
    return Net(tuple(specs), params)


def zero_net(specs) -> Net:
    return Net(tuple(specs), ParamStore({n: np.zeros(s) for n, s in param_shapes(specs)}))


def constant_velocity_net(velocity, specs=VELOCITY_SPECS) -> Net:
    """A velocity net whose output is ``velocity`` for every point."""
    net = zero_net(specs)
    last = len(net.specs) - 1
    net.params[f"{last}.b"] = np.asarray(velocity, dtype=np.float64)
    return net


def count_params(*nets: Net) -> int:
    return sum(net.params.size() for net in nets)


# ---------------------------------------------------------------------------
# layers


# when not None, forward() feeds every branch decision (ReLU masks, max
# routing, kNN graph) into this hash; used to spot kinks inside a
# finite-difference stencil
_pattern_hash = None


def _note(*arrays):
    if _pattern_hash is not None:
        for a in arrays:
            _pattern_hash.update(np.ascontiguousarray(a).tobytes())


def _relu(x):
    return np.maximum(x, 0.0)


def _max_rows(h, axis):
    # argmax picks the first index on ties, which fixes gradient routing
    idx = np.argmax(h, axis=axis)
    return np.take_along_axis(h, np.expand_dims(idx, axis), axis).squeeze(axis), idx


def edgeconv_forward(feats, nbr, w1, b1, w2, b2):
    """EdgeConv: row i = max_j relu(relu([f_i, f_j - f_i] W1 + b1) W2 + b2)."""
    n, c = feats.shape
    if w1.shape[0] != 2 * c or nbr.shape[0] != n:
        raise ShapeError(f"edgeconv got features {feats.shape}, w1 {w1.shape}, nbr {nbr.shape}")
    wa, wb = w1[:c], w1[c:]
    # [f_i, f_j - f_i] W1 = f_i (Wa - Wb) + f_j Wb
    p = feats @ (wa - wb)
    q = feats @ wb
    h1 = p[:, None, :] + q[nbr] + b1
    a1 = _relu(h1)
    h2 = a1 @ w2 + b2
    a2 = _relu(h2)
    out, arg = _max_rows(a2, axis=1)
    return out, (feats, nbr, h1, a1, h2, arg)


def edgeconv_backward(cache, dout, w1, w2, need_params=True):
    feats, nbr, h1, a1, h2, arg = cache
    n, g, o = h2.shape
    c = feats.shape[1]
    wa, wb = w1[:c], w1[c:]
    dh2 = np.zeros_like(h2)
    np.put_along_axis(dh2, arg[:, None, :], dout[:, None, :], axis=1)
    dh2 *= h2 > 0
    da1 = dh2 @ w2.T
    dh1 = da1 * (h1 > 0)
    dp = dh1.sum(axis=1)
    dq = np.zeros((n, dh1.shape[2]))
    np.add.at(dq, nbr.ravel(), dh1.reshape(n * g, -1))
    dfeats = dp @ (wa - wb).T + dq @ wb.T
    if not need_params:
        return None, dfeats
    dwa = feats.T @ dp
    dwb = feats.T @ (dq - dp)
    grads = {
        "w1": np.concatenate([dwa, dwb], axis=0),
        "b1": dp.sum(axis=0),
        "w2": a1.reshape(n * g, -1).T @ dh2.reshape(n * g, -1),
        "b2": dh2.sum(axis=(0, 1)),
    }
    return grads, dfeats


@dataclass
class ForwardCache:
    x: np.ndarray
    nbr: np.ndarray | None
    layers: list = field(default_factory=list)
    output: np.ndarray | None = None


def graph_for(net: Net, x: np.ndarray) -> np.ndarray | None:
    g = net.max_graph_k
    if g == 0:
        return None
    return KnnIndex(x).query(x, min(g, x.shape[0]))


def forward(net: Net, x, nbr=None):
    """Run ``net`` on an (n, 3) patch; returns (output, cache).

    The kNN graph is built once from the input positions and shared by all
    edgeconv layers (each uses the first ``graph_k`` columns).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeError(f"expected (n, 3) input, got {x.shape}")
    if nbr is None:
        nbr = graph_for(net, x)
    cache = ForwardCache(x=x, nbr=nbr)
    if nbr is not None:
        _note(nbr)
    h = x
    last = len(net.specs) - 1
    for i, spec in enumerate(net.specs):
        if h.shape[1] != spec.in_width:
            raise ShapeError(f"layer {i} expects width {spec.in_width}, got {h.shape[1]}")
        p = net.params
        if spec.kind == "edgeconv":
            k = min(spec.graph_k, nbr.shape[1])
            h, c = edgeconv_forward(h, nbr[:, :k], p[f"{i}.w1"], p[f"{i}.b1"], p[f"{i}.w2"], p[f"{i}.b2"])
            _note(c[2] > 0, c[4] > 0, c[5])
        elif spec.kind == "pointwise_mlp":
            pre = h @ p[f"{i}.w"] + p[f"{i}.b"]
            c = (h, pre, i < last)
            if i < last:
                _note(pre > 0)
            h = _relu(pre) if i < last else pre
        elif spec.kind == "global_max_pool":
            pooled, arg = _max_rows(h, axis=0)
            c = (h.shape, arg)
            _note(arg)
            h = pooled[None, :]
        else:  # sigmoid_head
            pre = h @ p[f"{i}.w"] + p[f"{i}.b"]
            out = 1.0 / (1.0 + np.exp(-pre))
            c = (h, out)
            h = out
        cache.layers.append(c)
    cache.output = h
    return h, cache


def backward(net: Net, cache: ForwardCache | None, cotangent, need_params=True):
    """Reverse pass; returns (parameter gradients or None, input cotangent)."""
    if cache is None or cache.output is None or len(cache.layers) != len(net.specs):
        raise ValueError("backward needs the cache of a completed forward call")
    dh = np.asarray(cotangent, dtype=np.float64)
    if dh.shape != cache.output.shape:
        raise ShapeError(f"cotangent shape {dh.shape} != output shape {cache.output.shape}")
    grads = {}
    p = net.params
    for i in range(len(net.specs) - 1, -1, -1):
        spec = net.specs[i]
        c = cache.layers[i]
        if spec.kind == "edgeconv":
            g, dh = edgeconv_backward(c, dh, p[f"{i}.w1"], p[f"{i}.w2"], need_params)
            if g:
                grads.update({f"{i}.{k}": v for k, v in g.items()})
        elif spec.kind == "pointwise_mlp":
            h_in, pre, act = c
            if act:
                dh = dh * (pre > 0)
            if need_params:
                grads[f"{i}.w"] = h_in.T @ dh
                grads[f"{i}.b"] = dh.sum(axis=0)
            dh = dh @ p[f"{i}.w"].T
        elif spec.kind == "global_max_pool":
            shape, arg = c
            d = np.zeros(shape)
            d[arg, np.arange(shape[1])] = dh[0]
            dh = d
        else:
            h_in, out = c
            dpre = dh * out * (1.0 - out)
            if need_params:
                grads[f"{i}.w"] = h_in.T @ dpre
                grads[f"{i}.b"] = dpre.sum(axis=0)
            dh = dpre @ p[f"{i}.w"].T
    if not need_params:
        return None, dh
    return ParamStore({name: grads[name] for name in net.params.names()}), dh


def _traced(loss_fn):
    global _pattern_hash
    _pattern_hash = hashlib.blake2b(digest_size=16)
    try:
        value = loss_fn()
        return value, _pattern_hash.digest()
    finally:
        _pattern_hash = None


def finite_difference(loss_fn, params: ParamStore, h: float = 1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params``.

    ``loss_fn`` must read ``params`` afresh on each call; entries are perturbed
    in place and restored. Returns ``(grads, smooth)`` where ``smooth`` marks
    entries whose +h and -h evaluations took the same ReLU/max/graph branches
    as the unperturbed point, i.e. where the difference quotient is a valid
    derivative estimate.
    """
    _, base = _traced(loss_fn)
    out = params.zeros_like()
    smooth = ParamStore({k: np.ones(v.shape) for k, v in params.items()})
    for name, arr in params.items():
        gflat = out[name].reshape(-1)
        sflat = smooth[name].reshape(-1)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up, pu = _traced(loss_fn)
            flat[j] = orig - h
            down, pd = _traced(loss_fn)
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
            sflat[j] = float(pu == base and pd == base)
    return out, smooth


def numeric_grads(loss_fn, params: ParamStore, h: float = 1e-5) -> ParamStore:
    return finite_difference(loss_fn, params, h)[0]


def max_rel_error(a: ParamStore, b: ParamStore, mask: ParamStore | None = None,
                  floor: float = 1e-6) -> float:
    """Largest |a - b| / max(|a|, |b|, floor), optionally over masked entries."""
    worst = 0.0
    for name, x in a.items():
        y = b[name]
        err = np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if mask is not None:
            err = err[mask[name] > 0]
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: ParamStore
    v: ParamStore
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, lr: float = 1e-4, **kw) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), lr=lr, **kw)


def adam_step(params: ParamStore, grads: ParamStore, state: AdamState):
    """One bias-corrected Adam update, applied in place; returns (params, state)."""
    if params.names() != grads.names():
        raise ShapeError("gradient names do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# model files

MAGIC = b"SPCF"
VERSION = 1


class ModelFileError(Exception):
    pass


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


def save_model(path, nets: dict[str, Net], K: int, N: int, patch_k: int) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<5I", VERSION, K, N, patch_k, len(nets))
    for name, net in nets.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", len(net.specs))
        for s in net.specs:
            buf += struct.pack("<4I", KIND_CODES[s.kind], s.in_width, s.out_width, s.graph_k)
        for _, arr in net.params.items():
            buf += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"model file truncated at byte {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]


def load_model(path):
    """Returns (nets, meta) where meta has keys K, N, patch_k."""
    r = _Reader(Path(path).read_bytes())
    if len(r.data) >= 4 and r.data[:4] != MAGIC:
        raise BadMagicError(f"bad magic bytes {r.data[:4]!r}")
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"model file version {version}, expected {VERSION}")
    K, N, patch_k, count = r.u32(4)
    nets = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        specs = []
        for _ in range(r.u32()):
            code, cin, cout, gk = r.u32(4)
            if code >= len(KINDS):
                raise ModelFileError(f"unknown layer kind code {code}")
            specs.append(LayerSpec(KINDS[code], cin, cout, gk))
        params = ParamStore()
        for pname, shape in param_shapes(specs):
            n = int(np.prod(shape))
            params.add(pname, np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape))
        nets[name] = Net(tuple(specs), params)
    if r.pos != len(r.data):
        raise ModelFileError(f"{len(r.data) - r.pos} trailing bytes after model data")
    return nets, {"K": K, "N": N, "patch_k": patch_k}
