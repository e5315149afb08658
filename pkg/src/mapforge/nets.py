"""Small MLPs with hand-rolled reverse-mode gradients.

Two roles: a localization net mapping a (recentered) point cloud to a pose
refinement through a shared per-point trunk, a coordinate-wise max pool,
and a regression head; and a map net mapping 2D coordinates to occupancy
probabilities. The compute schedule is fixed, so backward passes are
written out explicitly instead of taping; everything is float64 and
bit-deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import STREAM_INIT, keyed_rng
from .geometry import Pose, PointCloud, compose

CHECKPOINT_MAGIC = b"MFCKPT"
CHECKPOINT_VERSION = 1


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (in, hidden..., out); the nets built from these require
    at least one hidden layer (enforced where the roles are assembled)."""

    widths: tuple
    hidden_activation: str = "relu"
    final_activation: str = "none"  # or "sigmoid"

    def __post_init__(self) -> None:
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.hidden_activation not in ("relu", "tanh"):
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.final_activation not in ("none", "sigmoid"):
            raise ValueError(f"unknown final activation {self.final_activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def param_count(self) -> int:
        return sum(
            self.widths[i] * self.widths[i + 1] + self.widths[i + 1]
            for i in range(self.num_layers)
        )


@dataclass(frozen=True)
class LNetSpec:
    """Shared per-point trunk + pose head around a coordinate-wise max pool."""

    trunk: MlpSpec
    head: MlpSpec

    def __post_init__(self) -> None:
        if len(self.trunk.widths) < 3 or len(self.head.widths) < 3:
            raise ValueError("trunk and head each need at least one hidden layer")
        if self.trunk.widths[-1] != self.head.widths[0]:
            raise ValueError("trunk output width must feed the head input width")
        if self.head.widths[-1] != 3:
            raise ValueError("pose head must output 3 values (dtx, dty, dtheta)")

    def param_count(self) -> int:
        return self.trunk.param_count() + self.head.param_count()


def default_lnet_spec(trunk=(2, 64, 128), head=None) -> LNetSpec:
    head = head or (trunk[-1], 64, 3)
    return LNetSpec(trunk=MlpSpec(tuple(trunk)), head=MlpSpec(tuple(head)))


def default_mnet_spec(widths=(2, 64, 64, 1)) -> MlpSpec:
    return MlpSpec(tuple(widths), final_activation="sigmoid")


@dataclass
class NetParams:
    """Flat float64 parameter vector plus its layer shape metadata."""

    values: np.ndarray
    spec: object  # MlpSpec or LNetSpec
    role: str  # "lnet" or "mnet"

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.role not in ("lnet", "mnet"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "mnet" and len(self.spec.widths) < 3:
            raise ValueError("map net needs at least one hidden layer")
        if self.values.shape != (self.spec.param_count(),):
            raise ValueError(
                f"parameter vector length {self.values.shape} does not match "
                f"spec count {self.spec.param_count()}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite parameters")


def layer_views(values: np.ndarray, spec: MlpSpec, offset: int = 0):
    """(W, b) array views into the flat vector, per layer in order."""
    views = []
    pos = offset
    for i in range(spec.num_layers):
        n_in, n_out = spec.widths[i], spec.widths[i + 1]
        w = values[pos : pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = values[pos : pos + n_out]
        pos += n_out
        views.append((w, b))
    return views


def init_params(spec, seed: int, role: str) -> NetParams:
    """Uniform +-1/sqrt(fan_in) init, deterministic in (seed, role)."""
    chains = [spec.trunk, spec.head] if isinstance(spec, LNetSpec) else [spec]
    role_id = 0 if role == "lnet" else 1
    chunks = []
    layer_index = 0
    for chain in chains:
        for i in range(chain.num_layers):
            n_in, n_out = chain.widths[i], chain.widths[i + 1]
            rng = keyed_rng(seed, STREAM_INIT, role_id, layer_index)
            bound = 1.0 / np.sqrt(n_in)
            chunks.append(rng.uniform(-bound, bound, size=n_in * n_out + n_out))
            layer_index += 1
    return NetParams(values=np.concatenate(chunks), spec=spec, role=role)


# ---------------------------------------------------------------------------
# MLP forward/backward


def _linear_rows(a: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ w + b with a fixed accumulation order over the input features.

    Unlike BLAS matmul, each output row is computed identically no matter
    how many rows are evaluated together, so batched evaluation is
    bit-for-bit equal to a per-row loop.
    """
    z = np.tile(b, (a.shape[0], 1))
    for k in range(w.shape[0]):
        z += a[:, k, None] * w[k]
    return z


def mlp_forward(
    values: np.ndarray, spec: MlpSpec, x: np.ndarray, offset: int = 0,
    row_independent: bool = False,
):
    """Forward over rows of x; returns output and the cache for backward."""
    views = layer_views(values, spec, offset)
    activations = [np.asarray(x, dtype=np.float64)]
    pre = []
    a = activations[0]
    for li, (w, b) in enumerate(views):
        z = _linear_rows(a, w, b) if row_independent else a @ w + b
        pre.append(z)
        if li < spec.num_layers - 1:
            a = _act(spec.hidden_activation, z)
        elif spec.final_activation == "sigmoid":
            a = 1.0 / (1.0 + np.exp(-z))
        else:
            a = z
        activations.append(a)
    return a, (activations, pre)


def mlp_backward(values: np.ndarray, spec: MlpSpec, cache, d_out: np.ndarray, offset: int = 0):
    """Gradients of sum(d_out * output) w.r.t. flat params and input rows."""
    views = layer_views(values, spec, offset)
    activations, pre = cache
    d_values = np.zeros(spec.param_count())
    d_views = layer_views(d_values, spec)
    d = np.asarray(d_out, dtype=np.float64)
    for li in range(spec.num_layers - 1, -1, -1):
        z = pre[li]
        a_out = activations[li + 1]
        if li < spec.num_layers - 1:
            dz = d * _act_grad(spec.hidden_activation, z, a_out)
        elif spec.final_activation == "sigmoid":
            dz = d * a_out * (1.0 - a_out)
        else:
            dz = d
        a_in = activations[li]
        dw, db = d_views[li]
        dw += a_in.T @ dz
        db += dz.sum(axis=0) if dz.ndim == 2 else dz
        d = dz @ views[li][0].T
    return d_values, d


# ---------------------------------------------------------------------------
# L-Net: refinement = head(relu-trunk features max-pooled over points)


def lnet_refine(params: NetParams, points: np.ndarray):
    """Raw (dtx, dty, dtheta) refinement for recentered points, with cache."""
    if params.role != "lnet":
        raise ValueError("lnet_refine requires lnet params")
    if points.shape[0] == 0:
        raise ValueError("empty cloud")
    spec: LNetSpec = params.spec
    feats, trunk_cache = mlp_forward(params.values, spec.trunk, points)
    # relu before the pool; max commutes with relu so pool first, clamp after
    argmax = feats.argmax(axis=0)
    pooled = feats[argmax, np.arange(feats.shape[1])]
    clamped = np.maximum(pooled, 0.0)
    out, head_cache = mlp_forward(
        params.values, spec.head, clamped[None, :], offset=spec.trunk.param_count()
    )
    cache = (points, trunk_cache, argmax, pooled, head_cache)
    return out[0], cache


def lnet_refine_backward(params: NetParams, cache, d_refinement: np.ndarray) -> np.ndarray:
    """Parameter gradient of sum(d_refinement * refinement)."""
    spec: LNetSpec = params.spec
    points, trunk_cache, argmax, pooled, head_cache = cache
    d_head, d_feat = mlp_backward(
        params.values, spec.head, head_cache, np.asarray(d_refinement)[None, :],
        offset=spec.trunk.param_count(),
    )
    d_feat = d_feat[0] * (pooled > 0.0)
    # max pool routes each feature's gradient to its (first) argmax point
    d_trunk_out = np.zeros_like(trunk_cache[0][-1])
    d_trunk_out[argmax, np.arange(d_feat.shape[0])] = d_feat
    d_trunk, _ = mlp_backward(params.values, spec.trunk, trunk_cache, d_trunk_out)
    return np.concatenate([d_trunk, d_head])


def lnet_refine_batch(params: NetParams, points_list):
    """Refinements for several recentered clouds in one stacked pass.

    Numerically equivalent to calling lnet_refine per cloud; stacking the
    trunk and head matmuls is just cheaper. Returns ((F, 3), cache).
    """
    if params.role != "lnet":
        raise ValueError("lnet_refine_batch requires lnet params")
    spec: LNetSpec = params.spec
    sizes = [p.shape[0] for p in points_list]
    if any(n == 0 for n in sizes):
        raise ValueError("empty cloud")
    stacked = np.concatenate(points_list, axis=0)
    feats, trunk_cache = mlp_forward(params.values, spec.trunk, stacked)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    width = feats.shape[1]
    cols = np.arange(width)
    pooled = np.empty((len(sizes), width))
    argmax = np.empty((len(sizes), width), dtype=np.intp)
    for i in range(len(sizes)):
        seg = feats[offsets[i] : offsets[i + 1]]
        am = seg.argmax(axis=0)
        argmax[i] = am + offsets[i]
        pooled[i] = seg[am, cols]
    clamped = np.maximum(pooled, 0.0)
    out, head_cache = mlp_forward(
        params.values, spec.head, clamped, offset=spec.trunk.param_count()
    )
    cache = (trunk_cache, argmax, pooled, head_cache, stacked.shape[0])
    return out, cache


def lnet_refine_batch_backward(params: NetParams, cache, d_refinements: np.ndarray) -> np.ndarray:
    """Parameter gradient of sum(d_refinements * refinements)."""
    spec: LNetSpec = params.spec
    trunk_cache, argmax, pooled, head_cache, n_rows = cache
    d_head, d_feat = mlp_backward(
        params.values, spec.head, head_cache, np.asarray(d_refinements),
        offset=spec.trunk.param_count(),
    )
    d_feat = d_feat * (pooled > 0.0)
    width = pooled.shape[1]
    cols = np.arange(width)
    d_trunk_out = np.zeros((n_rows, width))
    for i in range(pooled.shape[0]):
        # (row, col) pairs are unique within a frame and frames are disjoint
        d_trunk_out[argmax[i], cols] += d_feat[i]
    d_trunk, _ = mlp_backward(params.values, spec.trunk, trunk_cache, d_trunk_out)
    return np.concatenate([d_trunk, d_head])


def lnet_forward(params: NetParams, cloud: PointCloud, warm_start: Pose):
    """Global pose estimate for one frame.

    The cloud must already be in warm-started global coordinates; it is
    recentered at its centroid before entering the trunk, and the predicted
    refinement is composed onto the warm-start pose. Invariant to point
    order and duplication by construction of the max pool.
    """
    centered = cloud.points - cloud.points.mean(axis=0)
    delta, cache = lnet_refine(params, centered)
    pose = compose(Pose.se2(delta[0], delta[1], delta[2]), warm_start)
    return pose, cache


# ---------------------------------------------------------------------------
# M-Net: independent per-coordinate occupancy probability


def mnet_forward(params: NetParams, coords: np.ndarray):
    """Occupancy probabilities in (0,1) for rows of coords, with cache.

    Coordinates are independent, and evaluation honors that bit-for-bit:
    batching any number of rows gives exactly the per-row results.
    """
    if params.role != "mnet":
        raise ValueError("mnet_forward requires mnet params")
    coords = np.asarray(coords, dtype=np.float64)
    probs, cache = mlp_forward(params.values, params.spec, coords, row_independent=True)
    return probs[:, 0], cache


def mnet_backward(params: NetParams, cache, d_probs: np.ndarray):
    """(d_params, d_coords) of sum(d_probs * probs)."""
    d_values, d_coords = mlp_backward(
        params.values, params.spec, cache, np.asarray(d_probs)[:, None]
    )
    return d_values, d_coords


# ---------------------------------------------------------------------------
# SE2 differentiables: the loss graph composes these jacobians


def transform_points_se2(pose_params: np.ndarray, points: np.ndarray) -> np.ndarray:
    tx, ty, theta = pose_params
    c, s = np.cos(theta), np.sin(theta)
    x, y = points[:, 0], points[:, 1]
    return np.stack([c * x - s * y + tx, s * x + c * y + ty], axis=1)


def transform_points_se2_backward(
    pose_params: np.ndarray, points: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """d/d(tx, ty, theta) of sum(upstream * (R(theta) p + t))."""
    tx, ty, theta = pose_params
    c, s = np.cos(theta), np.sin(theta)
    x, y = points[:, 0], points[:, 1]
    # analytic d(R p)/dtheta = (-s x - c y, c x - s y)
    dtheta = float(
        np.sum(upstream[:, 0] * (-s * x - c * y) + upstream[:, 1] * (c * x - s * y))
    )
    return np.array([upstream[:, 0].sum(), upstream[:, 1].sum(), dtheta])


def compose_se2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(tx, ty, theta) of compose(a, b); theta left unwrapped for gradients."""
    c, s = np.cos(a[2]), np.sin(a[2])
    return np.array(
        [a[0] + c * b[0] - s * b[1], a[1] + s * b[0] + c * b[1], a[2] + b[2]]
    )


def compose_se2_backward_left(a: np.ndarray, b: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """d/da of sum(upstream * compose(a, b)) with b held fixed."""
    c, s = np.cos(a[2]), np.sin(a[2])
    dtheta = upstream[0] * (-s * b[0] - c * b[1]) + upstream[1] * (c * b[0] - s * b[1])
    return np.array([upstream[0], upstream[1], dtheta + upstream[2]])


# ---------------------------------------------------------------------------
# adaptive-moment optimizer


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(m=np.zeros(size), v=np.zeros(size), t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(values: np.ndarray, grads: np.ndarray, state: OptimizerState):
    """One bias-corrected adaptive-moment update; returns (values, state)."""
    if values.shape != grads.shape:
        raise ValueError("parameter and gradient shapes differ")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(
        m=m, v=v, t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
    return new_values, new_state


# ---------------------------------------------------------------------------
# checkpoint file: magic, version byte, utf-8 key=value header, blank line,
# then named float64 arrays little-endian in header order


def save_checkpoint(path: str, meta: dict, arrays: dict) -> None:
    order = list(arrays.keys())
    lines = [f"{k}={v}" for k, v in meta.items()]
    lines.append("arrays=" + ";".join(f"{name}:{arrays[name].size}" for name in order))
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([CHECKPOINT_VERSION]))
        f.write(header)
        for name in order:
            f.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path: str):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a checkpoint file (bad magic)")
    version = blob[len(CHECKPOINT_MAGIC)]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    body = blob[len(CHECKPOINT_MAGIC) + 1 :]
    end = body.index(b"\n\n")
    meta = {}
    arrays_field = ""
    for line in body[:end].decode("utf-8").splitlines():
        key, val = line.split("=", 1)
        if key == "arrays":
            arrays_field = val
        else:
            meta[key] = val
    arrays = {}
    pos = end + 2
    if arrays_field:
        for item in arrays_field.split(";"):
            name, size = item.split(":")
            size = int(size)
            arrays[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).copy()
            pos += size * 8
    return meta, arrays
