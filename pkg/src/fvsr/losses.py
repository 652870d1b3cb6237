"""Loss evaluators with analytic gradients for one-step distillation and decoder training.

Every evaluator returns ``(value, grad)`` where ``grad`` is with respect to
the prediction. Evaluators follow the dtype of their inputs, so gradient
checks can run in float64 while production calls stay float32.

Squared norms are per-element means (``mean((a - b)**2)``) throughout, so
terms stay comparable across resolutions.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Callable
from dataclasses import dataclass, fields
from typing import Protocol

import numpy as np

from .errors import DimensionError, ScheduleError

LAMBDA_PERC = 2.0


def _same_shape(*arrs):
    shapes = {np.shape(a) for a in arrs}
    if len(shapes) != 1:
        raise DimensionError(f"shape mismatch: {sorted(shapes)}")


def _float(*arrs):
    dtype = np.result_type(*[np.asarray(a).dtype for a in arrs], np.float32)
    return [np.asarray(a, dtype=dtype) for a in arrs]


def mse(pred, target):
    pred, target = _float(pred, target)
    _same_shape(pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def flow_matching_loss(v_pred, z0, z1):
    """Velocity regression onto the straight path ``z1 - z0``."""
    v_pred, z0, z1 = _float(v_pred, z0, z1)
    _same_shape(v_pred, z0, z1)
    return mse(v_pred, z1 - z0)


# ---------------------------------------------------------------------------
# perceptual term


class Perceptual(Protocol):
    def __call__(self, x_pred, x_ref) -> tuple[float, np.ndarray]: ...


def _pool(x, s):
    """Average-pool the two axes before the channel axis by ``s`` (cropping the remainder)."""
    if s == 1:
        return x
    *lead, H, W, C = x.shape
    h, w = H // s, W // s
    x = x[..., : h * s, : w * s, :]
    return x.reshape(*lead, h, s, w, s, C).mean(axis=(-4, -2))


def _unpool(g, s, shape):
    if s == 1:
        return g
    *lead, H, W, C = shape
    h, w = g.shape[-3], g.shape[-2]
    up = np.repeat(np.repeat(g, s, axis=-3), s, axis=-2) / (s * s)
    out = np.zeros(shape, dtype=g.dtype)
    out[..., : h * s, : w * s, :] = up
    return out


def _grad_mag(x, eps):
    gx = x[..., :-1, 1:, :] - x[..., :-1, :-1, :]
    gy = x[..., 1:, :-1, :] - x[..., :-1, :-1, :]
    return np.sqrt(gx * gx + gy * gy + eps), gx, gy


@dataclass(frozen=True)
class GradientMagnitudeLoss:
    """Multi-scale L2 distance between image-gradient magnitudes.

    A pretrained-free, differentiable stand-in for a learned perceptual
    metric. Inputs are ``[..., H, W, C]``.
    """

    scales: tuple[int, ...] = (1, 2, 4)
    eps: float = 1e-4

    def __call__(self, x_pred, x_ref):
        x_pred, x_ref = _float(x_pred, x_ref)
        _same_shape(x_pred, x_ref)
        total = 0.0
        grad = np.zeros_like(x_pred)
        used = [s for s in self.scales if min(x_pred.shape[-3], x_pred.shape[-2]) // s >= 2]
        for s in used:
            p, r = _pool(x_pred, s), _pool(x_ref, s)
            mp, gx, gy = _grad_mag(p, self.eps)
            mr, _, _ = _grad_mag(r, self.eps)
            diff = mp - mr
            total += float(np.mean(diff * diff)) / len(used)
            dm = (2.0 / diff.size / len(used)) * diff
            dgx, dgy = dm * gx / mp, dm * gy / mp
            dp = np.zeros_like(p)
            dp[..., :-1, 1:, :] += dgx
            dp[..., :-1, :-1, :] -= dgx + dgy
            dp[..., 1:, :-1, :] += dgy
            grad += _unpool(dp, s, x_pred.shape)
        return total, grad


# ---------------------------------------------------------------------------
# reconstruction and decoder objectives


def reconstruction_loss(x_pred, x_gt, perceptual: Perceptual | None = None, lam: float = LAMBDA_PERC,
                        parts: bool = False):
    """Pixel MSE plus ``lam`` times a perceptual distance; returns ``(value, grad)``.

    With ``parts=True`` also returns ``(l2, perc)``.
    """
    perceptual = perceptual or GradientMagnitudeLoss()
    l2, g2 = mse(x_pred, x_gt)
    lp, gp = perceptual(*_float(x_pred, x_gt))
    value = l2 + lam * lp
    grad = g2 + lam * gp
    if parts:
        return value, grad, (l2, lp)
    return value, grad


def decoder_distill_loss(x_pred, x_gt, x_wan, perceptual: Perceptual | None = None, lam: float = LAMBDA_PERC):
    """Supervision from ground truth plus distillation from the reference decoder output."""
    _same_shape(x_pred, x_gt, x_wan)
    a, ga = reconstruction_loss(x_pred, x_gt, perceptual, lam)
    b, gb = reconstruction_loss(x_pred, x_wan, perceptual, lam)
    return a + b, ga + gb


# ---------------------------------------------------------------------------
# distribution matching


SCORE_KINDS = ("score", "eps", "velocity")


@dataclass(frozen=True)
class FlowSchedule:
    """Rectified-flow noising ``z_t = (1 - t) z + t ε`` with ``t`` drawn from ``[t_min, t_max]``."""

    t_min: float = 0.02
    t_max: float = 0.98

    def __post_init__(self):
        if not 0.0 <= self.t_min <= self.t_max < 1.0:
            raise ScheduleError(f"invalid schedule range [{self.t_min}, {self.t_max}]")

    def alpha(self, t):
        return 1.0 - t

    def sigma(self, t):
        return t

    def check(self, t):
        t = np.asarray(t)
        if (t < self.t_min).any() or (t > self.t_max).any():
            raise ScheduleError(f"timestep outside [{self.t_min}, {self.t_max}]")


@dataclass
class ScorePair:
    """Teacher (real) and fake-distribution predictors sharing one schedule.

    ``kind`` says what the callables return: ``score`` (∇ log p_t),
    ``eps`` (predicted noise) or ``velocity`` (``ε - z``).
    """

    real: Callable
    fake: Callable
    kind: str = "score"
    schedule: FlowSchedule = FlowSchedule()

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"kind must be one of {SCORE_KINDS}")

    def swapped(self) -> ScorePair:
        return ScorePair(self.fake, self.real, self.kind, self.schedule)

    def as_score(self, pred, z_t, t):
        if self.kind == "score":
            return pred
        sigma = self.schedule.sigma(t)
        if self.kind == "eps":
            return -pred / sigma
        eps = (1.0 - t) * pred + z_t
        return -eps / sigma


def dmd_gradient(z_pred, scores: ScorePair, n_samples: int = 1, seed: int = 0, t=None,
                 weight: Callable | None = None):
    """Monte-Carlo estimate of the generator gradient of ``KL(p_fake ‖ p_real)``.

    Each element along the leading (batch) axis draws its own ``t`` and
    noise per sample; the returned array has ``z_pred``'s shape and averages
    ``w(t) · α_t · (s_fake - s_real)(z_t, t)`` over ``n_samples`` draws.
    ``t`` pins every draw to one timestep instead of sampling it.
    """
    z = np.asarray(z_pred, dtype=np.result_type(np.asarray(z_pred).dtype, np.float32))
    sched = scores.schedule
    rng = np.random.default_rng(seed)
    bshape = (n_samples, z.shape[0]) + (1,) * (z.ndim - 1)
    if t is None:
        ts = rng.uniform(sched.t_min, sched.t_max, size=bshape)
    else:
        sched.check(t)
        ts = np.full(bshape, float(t))
    eps = rng.standard_normal((n_samples,) + z.shape)
    ts = ts.astype(z.dtype)
    eps = eps.astype(z.dtype)
    grad = np.zeros_like(z)
    for i in range(n_samples):
        ti = ts[i]
        z_t = sched.alpha(ti) * z + sched.sigma(ti) * eps[i]
        s_real = scores.as_score(scores.real(z_t, ti), z_t, ti)
        s_fake = scores.as_score(scores.fake(z_t, ti), z_t, ti)
        w = 1.0 if weight is None else weight(ti)
        grad += w * sched.alpha(ti) * (s_fake - s_real)
    return grad / n_samples


def gaussian_scores(mu_real: float, mu_fake: float, var: float = 1.0, schedule: FlowSchedule = FlowSchedule()):
    """Exact diffused scores of ``N(mu_real, var)`` vs ``N(mu_fake, var)`` under the flow schedule."""

    def make(mu):
        def score(z_t, t):
            a, s = schedule.alpha(t), schedule.sigma(t)
            return -(z_t - a * mu) / (a * a * var + s * s)

        return score

    return ScorePair(make(mu_real), make(mu_fake), "score", schedule)


def gaussian_kl_grad(mu_real: float, mu_fake: float, t, var: float = 1.0):
    """``d/dμ_fake`` of ``KL(N_t(μ_fake) ‖ N_t(μ_real))`` for the diffused pair at time ``t``."""
    a = 1.0 - np.asarray(t, dtype=np.float64)
    s = np.asarray(t, dtype=np.float64)
    return a * a * (mu_fake - mu_real) / (a * a * var + s * s)


def select_decode_latents(n_latents: int, n_select: int = 2, seed: int = 0) -> np.ndarray:
    """Indices of the latents decoded (and back-propagated) in one training iteration."""
    n_select = min(n_select, n_latents)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_latents, size=n_select, replace=False))


# ---------------------------------------------------------------------------
# reporting


@dataclass
class LossReport:
    """One-step objective breakdown; ``l_dmd`` is the DMD gradient norm (a monitoring proxy)."""

    l_dmd: float
    l_fm: float
    l_recon_l2: float
    l_perc: float
    lam: float = LAMBDA_PERC

    @property
    def total(self) -> float:
        return self.l_dmd + self.l_fm + self.l_recon_l2 + self.lam * self.l_perc

    def row(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["total"] = self.total
        return out


LOSS_CSV_COLUMNS = ("l_dmd", "l_fm", "l_recon_l2", "l_perc", "lam", "total")


def loss_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOSS_CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: f"{v:.8g}" for k, v in r.row().items()})
    return buf.getvalue()


def stage3_report(z_pred, scores: ScorePair, v_pred, z0, z1, x_pred, x_gt, perceptual: Perceptual | None = None,
                  n_samples: int = 1, seed: int = 0, decode_select: int = 2) -> LossReport:
    """Evaluate every term of the one-step objective.

    ``x_pred`` / ``x_gt`` are per-latent decoded frames ``[n_latents × ...]``;
    only ``decode_select`` latents, chosen by a seeded draw, enter the
    reconstruction terms.
    """
    g = dmd_gradient(z_pred, scores, n_samples=n_samples, seed=seed)
    l_fm, _ = flow_matching_loss(v_pred, z0, z1)
    idx = select_decode_latents(np.shape(x_pred)[0], decode_select, seed)
    _, _, (l2, lp) = reconstruction_loss(np.asarray(x_pred)[idx], np.asarray(x_gt)[idx], perceptual, parts=True)
    return LossReport(float(np.linalg.norm(g)), l_fm, l2, lp)
