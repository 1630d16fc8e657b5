"""Gradients, AdamW and the training loop for the aligned flow student."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .align import (PROJECTOR_KEYS, AlignConfig, alignment_loss, cka_loss, cos_dist_loss,
                    ntxent_loss, projector_apply, projector_backward)
from .errors import DegenerateBatch, InvalidArgument, NonFiniteGradient
from .flow import (NetConfig, TokenBatch, VelocityNet, cfm_loss, forward, init_params,
                   network_backward, save_checkpoint, load_checkpoint)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    eval_every: int = 100
    sampler_steps: int = 20
    protocol: str = "anchor_fixed"
    halve_after: int | None = None  # lr halving starts after this many steps (None: constant)
    halve_every: int = 200
    precision: str = "float32"  # network arithmetic during training; master weights stay float64
    align: AlignConfig = field(default_factory=AlignConfig)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise InvalidArgument("precision must be float32 or float64")
        if not 1 <= self.align.layer <= self.net.layers:
            raise InvalidArgument(f"align layer must lie in [1, {self.net.layers}]")

    def lr_at(self, step):
        if self.halve_after is None or step <= self.halve_after:
            return self.lr
        return self.lr * 0.5 ** ((step - self.halve_after - 1) // self.halve_every + 1)


# --------------------------------------------------------------------------- losses + backward

@dataclass
class StepBatch:
    """One training minibatch with its sampled time, noise and cached teacher features."""

    tokens: TokenBatch
    x_assembled: np.ndarray
    x_noise: np.ndarray
    t: np.ndarray  # per sample
    teacher: list | None
    sizes: list

    @property
    def x_t(self):
        tt = self.t[self.tokens.segments][:, None]
        return (1.0 - tt) * self.x_assembled + tt * self.x_noise

    def slices(self):
        out, start = [], 0
        for n in self.sizes:
            out.append(slice(start, start + n))
            start += n
        return out


def make_step_batch(samples, teacher, rng):
    tokens = TokenBatch.from_samples(samples)
    xa = np.concatenate([s.assembled() for s in samples], axis=0)
    t = rng.uniform(0.0, 1.0, len(samples))
    noise = rng.standard_normal(xa.shape)
    return StepBatch(tokens, xa, noise, t, teacher, [s.num_points for s in samples])


@dataclass
class LossTerms:
    total: float
    cfm: float
    align: float | None
    skipped: int = 0


def loss_and_grads(params, cfg: NetConfig, align_cfg: AlignConfig, batch: StepBatch,
                   align_rng=None, cka_indices=None, loss_scale=1.0, _corrupt=False,
                   with_grads=True):
    """Forward, per-sample losses averaged over the batch, and exact parameter gradients.

    With ``with_grads=False`` only the loss terms are computed and ``None`` is returned in
    place of the gradients.
    """
    trace = forward(params, cfg, batch.tokens, batch.x_t, batch.t)
    slices = batch.slices()
    nb = len(slices)
    grad_v = np.zeros_like(trace.velocity)
    cfm_total = 0.0
    for sl in slices:
        val, g = cfm_loss(trace.velocity[sl], batch.x_assembled[sl], batch.x_noise[sl],
                          return_grad=True)
        cfm_total += val
        grad_v[sl] = g * (loss_scale / nb)
    cfm = cfm_total / nb
    align_val, skipped = None, 0
    grad_align = None
    if align_cfg.active:
        h = trace.hidden[align_cfg.layer - 1]
        proj, pcache = projector_apply(params, h, return_cache=True)
        grad_proj = np.zeros_like(proj)
        vals = []
        for i, sl in enumerate(slices):
            y = batch.teacher[i]
            try:
                if align_cfg.objective == "cka" and cka_indices is not None:
                    out = cka_loss(proj[sl], y, cka_indices[i], return_grad=with_grads)
                else:
                    out = alignment_loss(align_cfg, proj[sl], y, align_rng, with_grads)
                val, g = out if with_grads else (out, None)
            except DegenerateBatch as exc:
                log.info("skipping alignment term for sample %d: %s", i, exc)
                skipped += 1
                continue
            vals.append(val)
            if with_grads:
                grad_proj[sl] = g
        if vals:
            align_val = float(np.mean(vals))
            grad_proj *= loss_scale * align_cfg.lam / len(vals)
            grad_align = (grad_proj, pcache)
    total = cfm + (align_cfg.lam * align_val if align_val is not None else 0.0)
    if not with_grads:
        return LossTerms(total * loss_scale, cfm, align_val, skipped), None
    grads = backward(params, trace, grad_v, grad_align, align_cfg.layer, _corrupt=_corrupt)
    return LossTerms(total * loss_scale, cfm, align_val, skipped), grads


def backward(params, trace, grad_velocity, grad_align=None, layer=None, _corrupt=False):
    """Parameter gradients from d/d(velocity) and, optionally, d/d(projected features).

    ``grad_align`` is ``(d loss / d projector output, projector cache)``; the projector
    gradient is grafted onto block ``layer``. Without it, projector gradients are zero.
    """
    grad_hidden = {}
    proj_grads = {}
    if grad_align is not None:
        g_out, pcache = grad_align
        proj_grads, dh = projector_backward(params, pcache, g_out)
        grad_hidden[layer] = dh
    grads = network_backward(params, trace, grad_velocity, grad_hidden)
    grads.update(proj_grads)
    if _corrupt:
        grads["block1.w1"] = -grads["block1.w1"]
    return grads


# --------------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adamw_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.01):
    """Decoupled weight decay + bias-corrected Adam. Only keys present in ``grads`` move."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    step = state.step + 1
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        p = params[name] * (1.0 - lr * weight_decay)
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
    return new_params, AdamState(m, v, step)


def _f32(d):
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in d.items()}


# --------------------------------------------------------------------------- curves

@dataclass
class CurvePoint:
    step: int
    pa: float
    cfm_loss: float
    align_loss: float


@dataclass
class TrainingCurve:
    points: list = field(default_factory=list)

    def append(self, point: CurvePoint):
        if self.points and point.step <= self.points[-1].step:
            raise InvalidArgument("curve steps must be strictly increasing")
        self.points.append(point)

    def max_pa(self):
        return max(p.pa for p in self.points)

    @property
    def steps(self):
        return [p.step for p in self.points]

    @property
    def pa(self):
        return [p.pa for p in self.points]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "pa", "cfm_loss", "align_loss"])
            for p in self.points:
                w.writerow([p.step, repr(p.pa), repr(p.cfm_loss), repr(p.align_loss)])

    @classmethod
    def read_csv(cls, path):
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.append(CurvePoint(int(row["step"]), float(row["pa"]),
                                        float(row["cfm_loss"]), float(row["align_loss"])))
        return curve


def steps_to_reach(curve: TrainingCurve, target_pa):
    """First evaluated step whose PA reaches ``target_pa``; None if never."""
    for p in curve.points:
        if p.pa >= target_pa:
            return p.step
    return None


# --------------------------------------------------------------------------- training loop

@dataclass
class TrainState:
    params: dict
    opt: AdamState
    best_params: dict
    best_pa: float = -1.0


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    curve: TrainingCurve
    state: TrainState
    step_losses: list = field(default_factory=list)  # LossTerms of every step this call ran


def _batch_rng(seed, step):
    return np.random.default_rng([seed, step, 0])


def _align_rng(seed, step):
    return np.random.default_rng([seed, step, 1])


def validation_losses(params, config: TrainConfig, val_set, val_teacher):
    """CFM and alignment losses on a fixed draw of (t, noise) over the validation set."""
    rng = np.random.default_rng([config.seed, 2 ** 31 - 1])
    batch = make_step_batch(val_set, val_teacher, rng)
    terms, _ = loss_and_grads(params, config.net, config.align, batch,
                              align_rng=np.random.default_rng([config.seed, 2 ** 31 - 2]))
    return terms.cfm, (terms.align if terms.align is not None else float("nan"))


def train(train_set, val_set, config: TrainConfig, train_teacher=None, val_teacher=None,
          resume: TrainState | None = None, start_step=0, curve=None, stop_at=None,
          on_eval=None):
    """Run ``config.steps`` AdamW steps; evaluates validation PA every ``eval_every`` steps.

    Every random draw depends only on (seed, step), so a run resumed from a saved state
    continues exactly as the uninterrupted one would.
    """
    from .evalharness import evaluate

    if not train_set or not val_set:
        raise InvalidArgument("train and validation sets must be non-empty")
    align_on = config.align.active
    if align_on and (train_teacher is None or val_teacher is None):
        raise InvalidArgument("alignment needs teacher features for train and validation")
    if resume is None:
        params = init_params(config.net, np.random.default_rng([config.seed, 2 ** 32 - 1]))
        state = TrainState(params, AdamState.zeros_like(params), dict(params))
    else:
        state = resume
    curve = curve if curve is not None else TrainingCurve()
    stop_at = config.steps if stop_at is None else stop_at

    dtype = np.dtype(config.precision)

    def working(params):
        return {k: v.astype(dtype) for k, v in params.items()}

    def run_eval(step):
        work = working(state.params)
        report = evaluate(VelocityNet(work, config.net), val_set, config.protocol,
                          config.sampler_steps, seed=config.seed, pose_metrics=False)
        cfm_v, align_v = validation_losses(work, config, val_set, val_teacher)
        curve.append(CurvePoint(step, report.pa, cfm_v, align_v))
        if report.pa > state.best_pa:
            state.best_pa = report.pa
            state.best_params = dict(state.params)
        log.info("step %d  val PA %.4f  cfm %.4f  align %.4f", step, report.pa, cfm_v, align_v)
        if on_eval is not None:
            on_eval(step, state, curve)

    if start_step == 0 and not curve.points:
        run_eval(0)
    bs = min(config.batch_size, len(train_set))
    step_losses = []
    for step in range(start_step + 1, stop_at + 1):
        rng = _batch_rng(config.seed, step)
        idx = np.sort(rng.choice(len(train_set), size=bs, replace=False))
        teacher = [train_teacher[i] for i in idx] if align_on else None
        batch = make_step_batch([train_set[i] for i in idx], teacher, rng)
        terms, grads = loss_and_grads(working(state.params), config.net, config.align, batch,
                                      align_rng=_align_rng(config.seed, step))
        step_losses.append(terms)
        if not align_on:
            for key in PROJECTOR_KEYS:
                grads.pop(key, None)
        params, opt = adamw_step(state.params, grads, state.opt, config.lr_at(step),
                                 config.beta1, config.beta2, config.eps, config.weight_decay)
        state.params, state.opt = _f32(params), AdamState(_f32(opt.m), _f32(opt.v), opt.step)
        if step % config.eval_every == 0 or step == config.steps:
            run_eval(step)
    return TrainResult(state.params, state.best_params, curve, state, step_losses)


# --------------------------------------------------------------------------- checkpoints

def save_state(path, state: TrainState, step):
    tensors = dict(state.params)
    tensors.update({f"adam.m.{k}": v for k, v in state.opt.m.items()})
    tensors.update({f"adam.v.{k}": v for k, v in state.opt.v.items()})
    tensors.update({f"best.{k}": v for k, v in state.best_params.items()})
    tensors["meta.step"] = np.array([step], dtype=np.float64)
    tensors["meta.opt_step"] = np.array([state.opt.step], dtype=np.float64)
    tensors["meta.best_pa"] = np.array([state.best_pa], dtype=np.float64)
    save_checkpoint(path, tensors)


def load_state(path):
    """Returns (TrainState, step). Plain parameter checkpoints load with fresh optimizer state."""
    tensors = load_checkpoint(path)
    params = {k: v for k, v in tensors.items() if not k.startswith(("adam.", "best.", "meta."))}
    if "meta.step" not in tensors:
        return TrainState(params, AdamState.zeros_like(params), dict(params)), 0
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
    best = {k[len("best."):]: v for k, v in tensors.items() if k.startswith("best.")}
    state = TrainState(params, AdamState(m, v, int(tensors["meta.opt_step"][0])), best,
                       float(np.float32(tensors["meta.best_pa"][0])))
    return state, int(tensors["meta.step"][0])


def infer_net_config(params, **overrides):
    d = params["in.b"].shape[0]
    layers = sum(1 for k in params if k.startswith("block") and k.endswith(".w1"))
    cfg = dict(hidden=d, layers=layers, time_bins=params["in.time"].shape[0],
               max_parts=params["in.part"].shape[0], teacher_dim=params["proj.b3"].shape[0],
               part_pool="block1.p" in params)
    cfg.update(overrides)
    return NetConfig(**cfg)


# --------------------------------------------------------------------------- gradient audit

AUDIT_NET = NetConfig(hidden=16, layers=6, teacher_dim=16)


def audit_batch(sample, teacher_feats, seed=0, t=0.37):
    rng = np.random.default_rng([seed, 99])
    batch = make_step_batch([sample], [teacher_feats], rng)
    batch.t = np.array([t])
    return batch


def finite_diff_audit(params, net_cfg, align_cfg, batch, h=1e-5, max_entries=None, seed=0,
                      _corrupt=False):
    """Central-difference check of every gradient tensor.

    Returns {tensor name: max relative error}, where the relative error of an entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    """
    n = batch.tokens.n_tokens
    cka_idx = [np.arange(min(align_cfg.cka_n, n))] if align_cfg.objective == "cka" else None

    def loss(p):
        terms, _ = loss_and_grads(p, net_cfg, align_cfg, batch, cka_indices=cka_idx,
                                  with_grads=False)
        return terms.total

    _, grads = loss_and_grads(params, net_cfg, align_cfg, batch, cka_indices=cka_idx,
                              _corrupt=_corrupt)
    rng = np.random.default_rng(seed)
    report = {}
    for name, value in params.items():
        flat_count = value.size
        if max_entries is None or flat_count <= max_entries:
            entries = np.arange(flat_count)
        else:
            top = np.argsort(-np.abs(grads[name]).ravel(), kind="stable")[: max_entries // 2]
            rest = rng.choice(flat_count, size=max_entries - len(top), replace=False)
            entries = np.unique(np.concatenate([top, rest]))
        worst = 0.0
        for e in entries:
            pert = dict(params)
            base = params[name].ravel()
            plus = base.copy()
            plus[e] += h
            minus = base.copy()
            minus[e] -= h
            pert[name] = plus.reshape(value.shape)
            f_plus = loss(pert)
            pert[name] = minus.reshape(value.shape)
            f_minus = loss(pert)
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = grads[name].ravel()[e]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, err)
        report[name] = worst
    return report
