"""Flow-matching student: straight-line paths, a set-block velocity network, Euler sampling.

Conventions: ``x_assembled`` is the data endpoint (t=0), ``x_noise`` the Gaussian endpoint
(t=1). The regression target is the constant velocity ``x_noise - x_assembled`` and the
sampler integrates from t=1 down to t=0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .align import PROJECTOR_KEYS
from .errors import DivergedError, FormatError, InvalidArgument
from .geometry import RigidTransform, kabsch

CHECKPOINT_MAGIC = b"TORW"
CHECKPOINT_VERSION = 1


def interpolate(x_assembled, x_noise, t):
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"t must lie in [0, 1], got {t}")
    xa = np.asarray(x_assembled, dtype=np.float64)
    xn = np.asarray(x_noise, dtype=np.float64)
    if xa.shape != xn.shape:
        raise InvalidArgument(f"shape mismatch {xa.shape} vs {xn.shape}")
    return (1.0 - t) * xa + t * xn


def target_velocity(x_assembled, x_noise):
    xa = np.asarray(x_assembled, dtype=np.float64)
    xn = np.asarray(x_noise, dtype=np.float64)
    if xa.shape != xn.shape:
        raise InvalidArgument(f"shape mismatch {xa.shape} vs {xn.shape}")
    return xn - xa


def cfm_loss(predicted, x_assembled, x_noise, return_grad=False):
    """Mean squared velocity error over all N*3 entries."""
    pred = np.asarray(predicted, dtype=np.float64)
    target = target_velocity(x_assembled, x_noise)
    if pred.shape != target.shape:
        raise InvalidArgument(f"prediction {pred.shape} does not match target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    if return_grad:
        return loss, 2.0 * diff / diff.size
    return loss


# --------------------------------------------------------------------------- network

@dataclass(frozen=True)
class NetConfig:
    hidden: int = 64
    layers: int = 6
    time_bins: int = 32
    max_parts: int = 8
    teacher_dim: int = 16
    part_pool: bool = True

    def __post_init__(self):
        if self.layers < 2:
            raise InvalidArgument("the network needs at least 2 blocks")
        if self.time_bins % 2:
            raise InvalidArgument("time_bins must be even")


def time_features(t, bins=32):
    """Sinusoidal embedding of t in [0, 1]; shape (len(t), bins)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.pi * 2.0 ** np.linspace(0.0, 7.0, bins // 2)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def param_shapes(cfg: NetConfig):
    d = cfg.hidden
    shapes = {
        "in.wx": (3, d), "in.wu": (3, d), "in.b": (d,),
        "in.part": (cfg.max_parts, d), "in.time": (cfg.time_bins, d),
    }
    for l in range(1, cfg.layers + 1):
        shapes[f"block{l}.w1"] = (d, d)
        shapes[f"block{l}.m"] = (d, d)
        if cfg.part_pool:
            shapes[f"block{l}.p"] = (d, d)
        shapes[f"block{l}.b1"] = (d,)
        shapes[f"block{l}.w2"] = (d, d)
        shapes[f"block{l}.b2"] = (d,)
    shapes["out.w"] = (d, 3)
    shapes["out.b"] = (3,)
    shapes["proj.w1"] = (d, d)
    shapes["proj.b1"] = (d,)
    shapes["proj.w2"] = (d, d)
    shapes["proj.b2"] = (d,)
    shapes["proj.w3"] = (d, cfg.teacher_dim)
    shapes["proj.b3"] = (cfg.teacher_dim,)
    return shapes


def _fan_in(name, shape):
    if name in ("in.part", "in.time"):
        return shape[1]
    return shape[0]


def init_params(cfg: NetConfig, rng):
    """Uniform fan-in initialization, zero biases, zero output head.

    Values are rounded to float32 so checkpoints round-trip exactly.
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("out.") or len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            arr = rng.uniform(-bound, bound, shape)
        params[name] = arr.astype(np.float32).astype(np.float64)
    return params


@dataclass
class TokenBatch:
    """Tokens of one or more samples stacked row-wise."""

    cond: np.ndarray  # (N, 3) unposed coordinates
    part_ids: np.ndarray  # (N,)
    segments: np.ndarray  # (N,) sample index of every token
    num_segments: int
    part_segments: np.ndarray = field(default=None)  # (N,) unique (sample, part) group id
    _pool: np.ndarray = field(default=None, repr=False)
    _part_pool: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.cond = np.asarray(self.cond, dtype=np.float64)
        self.part_ids = np.asarray(self.part_ids, dtype=np.int64)
        self.segments = np.asarray(self.segments, dtype=np.int64)
        n = self.cond.shape[0]
        if self.part_ids.shape != (n,) or self.segments.shape != (n,):
            raise InvalidArgument("cond, part_ids and segments must agree on N")
        if self.part_segments is None:
            self.part_segments = self.segments * 1024 + self.part_ids
        _, self.part_segments = np.unique(self.part_segments, return_inverse=True)
        self._pool = _SegmentMean(self.segments)
        self._part_pool = _SegmentMean(self.part_segments)

    @property
    def n_tokens(self):
        return self.cond.shape[0]

    def pool(self, h):
        """Per-sample mean broadcast back to tokens (a symmetric linear map)."""
        return self._pool(h)

    def part_pool(self, h):
        return self._part_pool(h)

    @classmethod
    def from_samples(cls, samples):
        cond = np.concatenate([s.unposed() for s in samples], axis=0)
        pids = np.concatenate([s.part_labels for s in samples])
        segs = np.concatenate([np.full(s.num_points, i) for i, s in enumerate(samples)])
        return cls(cond, pids, segs, len(samples))


class _SegmentMean:
    """Group-mean of rows, broadcast back to every row of the group."""

    def __init__(self, groups):
        groups = np.asarray(groups)
        _, self.inverse, sizes = np.unique(groups, return_inverse=True, return_counts=True)
        n = len(groups)
        self.sum = sparse.csr_matrix((np.ones(n), (self.inverse, np.arange(n))), shape=(len(sizes), n))
        self.mean = sparse.csr_matrix((1.0 / sizes[self.inverse], (self.inverse, np.arange(n))),
                                      shape=(len(sizes), n))
        self._f32 = None

    def _ops(self, dtype):
        if dtype != np.float32:
            return self.sum, self.mean
        if self._f32 is None:
            self._f32 = (self.sum.astype(np.float32), self.mean.astype(np.float32))
        return self._f32

    def __call__(self, h):
        return self.means(h)[self.inverse]

    def means(self, h):
        return self._ops(h.dtype)[1] @ h

    def sums(self, d):
        return self._ops(d.dtype)[0] @ d


@dataclass
class ForwardTrace:
    velocity: np.ndarray
    hidden: list  # h^(1..L), each (N, D)
    cache: dict = field(repr=False)


def forward(params, cfg: NetConfig, batch: TokenBatch, x_t, t):
    """Velocity prediction plus every block output. ``t`` is a scalar or one value per sample.

    Arithmetic runs in the dtype of the parameters (float32 parameters give a float32 pass).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (batch.n_tokens, 3):
        raise InvalidArgument(f"x_t has shape {x_t.shape}, expected ({batch.n_tokens}, 3)")
    if not np.all(np.isfinite(x_t)):
        raise InvalidArgument("x_t contains non-finite values")
    if np.any(batch.part_ids >= cfg.max_parts):
        raise InvalidArgument(f"part id exceeds max_parts={cfg.max_parts}")
    dt = params["in.wx"].dtype
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch.num_segments,))
    tfeat = time_features(t, cfg.time_bins)[batch.segments].astype(dt, copy=False)
    x_t = x_t.astype(dt, copy=False)
    h = (x_t @ params["in.wx"] + batch.cond.astype(dt, copy=False) @ params["in.wu"] + params["in.b"]
         + params["in.part"][batch.part_ids] + tfeat @ params["in.time"])
    hidden, blocks = [], []
    pool, part_pool = batch._pool, batch._part_pool
    for l in range(1, cfg.layers + 1):
        # pooled messages are mapped at group level, then broadcast to tokens
        g = pool.means(h)
        msg = g @ params[f"block{l}.m"]
        gp = None
        if cfg.part_pool:
            gp = part_pool.means(h)
            msg = msg[pool.inverse] + (gp @ params[f"block{l}.p"])[part_pool.inverse]
        else:
            msg = msg[pool.inverse]
        a = h @ params[f"block{l}.w1"] + msg + params[f"block{l}.b1"]
        sig = 1.0 / (1.0 + np.exp(-a))
        s = a * sig
        blocks.append((h, g, gp, a, sig))
        h = h + s @ params[f"block{l}.w2"] + params[f"block{l}.b2"]
        hidden.append(h)
    v = h @ params["out.w"] + params["out.b"]
    cache = {"x_t": x_t, "tfeat": tfeat, "blocks": blocks, "batch": batch, "cfg": cfg}
    return ForwardTrace(v, hidden, cache)


def network_backward(params, trace: ForwardTrace, grad_velocity, grad_hidden=None):
    """Reverse pass. ``grad_hidden`` maps 1-based layer index -> d loss / d h^(l)."""
    cfg, batch = trace.cache["cfg"], trace.cache["batch"]
    dt = params["out.w"].dtype
    grad_hidden = {l: g.astype(dt, copy=False) for l, g in (grad_hidden or {}).items()}
    grad_velocity = np.asarray(grad_velocity).astype(dt, copy=False)
    grads = {}
    h_last = trace.hidden[-1]
    grads["out.w"] = h_last.T @ grad_velocity
    grads["out.b"] = grad_velocity.sum(axis=0)
    dh = grad_velocity @ params["out.w"].T
    for l in range(cfg.layers, 0, -1):
        if l in grad_hidden:
            dh = dh + grad_hidden[l]
        h_prev, g, gp, a, sig = trace.cache["blocks"][l - 1]
        grads[f"block{l}.w2"] = (a * sig).T @ dh
        grads[f"block{l}.b2"] = dh.sum(axis=0)
        da = (dh @ params[f"block{l}.w2"].T) * (sig * (1.0 + a * (1.0 - sig)))
        grads[f"block{l}.w1"] = h_prev.T @ da
        da_s = batch._pool.sums(da)
        grads[f"block{l}.m"] = g.T @ da_s
        grads[f"block{l}.b1"] = da_s.sum(axis=0)
        back = (batch._pool.means(da) @ params[f"block{l}.m"].T)[batch._pool.inverse]
        if cfg.part_pool:
            grads[f"block{l}.p"] = gp.T @ batch._part_pool.sums(da)
            back = back + (batch._part_pool.means(da) @ params[f"block{l}.p"].T)[batch._part_pool.inverse]
        dh = dh + da @ params[f"block{l}.w1"].T + back
    grads["in.wx"] = trace.cache["x_t"].T @ dh
    grads["in.wu"] = batch.cond.T.astype(dt, copy=False) @ dh
    grads["in.b"] = dh.sum(axis=0)
    part = np.zeros_like(params["in.part"])
    np.add.at(part, batch.part_ids, dh)
    grads["in.part"] = part
    grads["in.time"] = trace.cache["tfeat"].T @ dh
    for key in PROJECTOR_KEYS:
        grads.setdefault(key, np.zeros_like(params[key]))
    return grads


class VelocityNet:
    """Parameters plus config; the object the sampler and evaluator call."""

    def __init__(self, params, cfg: NetConfig):
        self.params = params
        self.cfg = cfg

    def velocity(self, x_t, t, batch):
        return forward(self.params, self.cfg, batch, x_t, t).velocity


class OracleField:
    """Exact constant velocity field x_noise - x_assembled; a test and evaluation oracle."""

    def __init__(self, x_assembled, x_noise):
        self.v = target_velocity(x_assembled, x_noise)

    def velocity(self, x_t, t, batch=None):
        return self.v


def sample(model, x_noise, batch, steps=20):
    """Explicit Euler from t=1 to t=0 with ``steps`` uniform steps."""
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    x = np.array(x_noise, dtype=np.float64)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        x = x - dt * model.velocity(x, t, batch)
        if not np.all(np.isfinite(x)):
            raise DivergedError(f"sampler state became non-finite at step {i}", step=i)
    return x


def recover_poses(sample_, x_hat, anchor_fixed=True):
    """Per-part Procrustes fit from the unposed part to its predicted points."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    out = []
    for k, (part, sl) in enumerate(zip(sample_.parts, sample_.part_slices())):
        if anchor_fixed and k == sample_.anchor_index:
            out.append(RigidTransform.identity())
            continue
        try:
            out.append(kabsch(part, x_hat[sl]))
        except ValueError as exc:
            exc.args = (f"part {k}: {exc.args[0]}",)
            exc.part = k
            raise
    return out


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, tensors):
    """TORW: magic, version, count, then per tensor name/rank/dims header and float32 payload."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(enc)) + enc)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected TORW", 0)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError("truncated checkpoint", pos)
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise FormatError("truncated tensor name", pos)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        count_el = int(np.prod(dims)) if rank else 1
        if pos + 4 * count_el > len(buf):
            raise FormatError(f"truncated payload for {name}", pos)
        arr = np.frombuffer(buf, dtype="<f4", count=count_el, offset=pos).reshape(dims)
        pos += 4 * count_el
        out[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise FormatError("trailing bytes", pos)
    return out
