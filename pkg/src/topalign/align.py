"""Student-teacher alignment objectives: cosine distance, NT-Xent and subsampled CKA.

Every loss takes the projected student features ``h`` (N, D_f) and teacher features ``y``
and, with ``return_grad=True``, also returns d(loss)/d(h).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatch, DegenerateFeature, InvalidArgument

log = logging.getLogger(__name__)

OBJECTIVES = ("none", "cos_dist", "ntxent", "cka")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class AlignConfig:
    objective: str = "cka"
    lam: float = 0.5
    temperature: float = 0.07
    cka_n: int = 256
    layer: int = 5

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise InvalidArgument(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not self.lam >= 0:
            raise InvalidArgument(f"lam must be >= 0, got {self.lam}")
        if not self.temperature > 0:
            raise InvalidArgument(f"temperature must be > 0, got {self.temperature}")
        if self.cka_n < 2:
            raise InvalidArgument(f"cka_n must be >= 2, got {self.cka_n}")

    @property
    def active(self):
        return self.objective != "none" and self.lam > 0


# --------------------------------------------------------------------------- projector

def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


PROJECTOR_KEYS = ("proj.w1", "proj.b1", "proj.w2", "proj.b2", "proj.w3", "proj.b3")


def projector_apply(params, h, return_cache=False):
    """affine -> SiLU -> affine -> SiLU -> affine."""
    h = np.asarray(h)
    if h.dtype != np.float32:
        h = h.astype(np.float64)
    w1 = params["proj.w1"]
    if h.ndim != 2 or h.shape[1] != w1.shape[0]:
        raise InvalidArgument(f"projector expects (N, {w1.shape[0]}) input, got {h.shape}")
    a1 = h @ params["proj.w1"] + params["proj.b1"]
    z1 = silu(a1)
    a2 = z1 @ params["proj.w2"] + params["proj.b2"]
    z2 = silu(a2)
    out = z2 @ params["proj.w3"] + params["proj.b3"]
    if return_cache:
        return out, (h, a1, z1, a2, z2)
    return out


def projector_backward(params, cache, grad_out):
    h, a1, z1, a2, z2 = cache
    grads = {"proj.w3": z2.T @ grad_out, "proj.b3": grad_out.sum(axis=0)}
    g = (grad_out @ params["proj.w3"].T) * silu_grad(a2)
    grads["proj.w2"] = z1.T @ g
    grads["proj.b2"] = g.sum(axis=0)
    g = (g @ params["proj.w2"].T) * silu_grad(a1)
    grads["proj.w1"] = h.T @ g
    grads["proj.b1"] = g.sum(axis=0)
    return grads, g @ params["proj.w1"].T


# --------------------------------------------------------------------------- helpers

def _check_pair(h, y, same_width=True):
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if h.ndim != 2 or y.ndim != 2 or h.shape[0] != y.shape[0]:
        raise InvalidArgument(f"student {h.shape} and teacher {y.shape} differ in token count")
    if same_width and h.shape != y.shape:
        raise InvalidArgument(f"student {h.shape} and teacher {y.shape} shapes differ")
    return h, y


def _unit_rows(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] == 0)
    if bad.size:
        raise DegenerateFeature(f"{what} row {bad[0]} has zero norm", row=int(bad[0]))
    return x / norms, norms


def _unit_rows_backward(unit, norms, grad_unit):
    """Backprop through x -> x / |x|."""
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms


# --------------------------------------------------------------------------- losses

def cos_dist_loss(h, y, return_grad=False):
    """Mean over tokens of 1 - cos(h_i, y_i)."""
    h, y = _check_pair(h, y)
    hn, hnorm = _unit_rows(h, "student")
    yn, _ = _unit_rows(y, "teacher")
    sims = np.sum(hn * yn, axis=1)
    n = h.shape[0]
    loss = float(np.mean(1.0 - sims))
    if not return_grad:
        return loss
    return loss, _unit_rows_backward(hn, hnorm, -yn / n)


def ntxent_loss(h, y, temperature=0.07, return_grad=False):
    """Token-level InfoNCE: h_i should pick y_i among all teacher rows of the sample."""
    if not temperature > 0:
        raise InvalidArgument(f"temperature must be > 0, got {temperature}")
    h, y = _check_pair(h, y)
    hn, hnorm = _unit_rows(h, "student")
    yn, _ = _unit_rows(y, "teacher")
    n = h.shape[0]
    logits = (hn @ yn.T) / temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - np.diag(shifted)))
    if not return_grad:
        return loss
    soft = np.exp(shifted - lse[:, None])
    soft[np.diag_indices(n)] -= 1.0
    grad_hn = (soft / n) @ yn / temperature
    return loss, _unit_rows_backward(hn, hnorm, grad_hn)


@dataclass
class GramPair:
    student: np.ndarray
    teacher: np.ndarray
    student_centered: np.ndarray
    teacher_centered: np.ndarray


def centering_matrix(n):
    return np.eye(n) - np.full((n, n), 1.0 / n)


def double_center(g):
    """H g H without forming H."""
    return g - g.mean(axis=0, keepdims=True) - g.mean(axis=1, keepdims=True) + g.mean()


def gram_pair(h, y, indices):
    # Gram matrices are N x N, so the two widths may differ
    h, y = _check_pair(h, y, same_width=False)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or len(idx) < 2:
        raise InvalidArgument("CKA needs at least 2 subsampled indices")
    if len(np.unique(idx)) != len(idx) or idx.min() < 0 or idx.max() >= h.shape[0]:
        raise InvalidArgument("subsample indices must be distinct and within [0, N)")
    xs, ys = h[idx], y[idx]
    gs, gt = xs @ xs.T, ys @ ys.T
    return GramPair(gs, gt, double_center(gs), double_center(gt))


def cka_loss(h, y, indices, return_grad=False):
    """1 - normalized Frobenius alignment of the centered linear Gram matrices on ``indices``."""
    h, y = _check_pair(h, y, same_width=False)
    idx = np.asarray(indices, dtype=np.int64)
    g = gram_pair(h, y, idx)
    ns = np.linalg.norm(g.student_centered)
    nt = np.linalg.norm(g.teacher_centered)
    if ns < NORM_EPS or nt < NORM_EPS:
        raise DegenerateBatch("centered Gram matrix is zero; subsampled rows are all identical")
    inner = float(np.sum(g.student_centered * g.teacher_centered))
    loss = 1.0 - inner / (ns * nt + NORM_EPS)
    if not return_grad:
        return loss
    # d loss / d centered student Gram
    denom = ns * nt + NORM_EPS
    d_gsc = -g.teacher_centered / denom + inner * nt * g.student_centered / (ns * denom * denom)
    d_gs = double_center(d_gsc)
    grad = np.zeros_like(h)
    np.add.at(grad, idx, (d_gs + d_gs.T) @ h[idx])
    return loss, grad


def total_loss(cfm, align, lam):
    if not (np.isfinite(cfm) and np.isfinite(align)):
        raise InvalidArgument("loss terms must be finite")
    return cfm + lam * align


def subsample_indices(n, total, rng):
    """``n`` distinct token indices drawn uniformly without replacement (clamped to ``total``)."""
    if n < 2:
        raise InvalidArgument(f"subsample size must be >= 2, got {n}")
    if n > total:
        log.warning("CKA subsample size %d exceeds %d tokens; using all tokens", n, total)
        n = total
    return rng.choice(total, size=n, replace=False)


def alignment_loss(config: AlignConfig, h, y, rng, return_grad=True):
    """Dispatch to the configured objective; CKA draws its shared subsample from ``rng``."""
    if config.objective == "cos_dist":
        return cos_dist_loss(h, y, return_grad=return_grad)
    if config.objective == "ntxent":
        return ntxent_loss(h, y, config.temperature, return_grad=return_grad)
    if config.objective == "cka":
        idx = subsample_indices(config.cka_n, h.shape[0], rng)
        return cka_loss(h, y, idx, return_grad=return_grad)
    raise InvalidArgument("alignment objective is 'none'")
