"""Noise schedules, deterministic DDIM sampling/inversion, mock denoisers.

Noise levels index the schedule: level 0 is clean (alpha_bar = 1
exactly) and level T is pure noise. Sampling steps count the other way:
step s of a T-step run operates at level T - s. All trajectory math
runs in float64; rasters are cast to float32 only at storage
boundaries.

The mock denoiser stands in for a trained noise predictor. Its clean
image estimate is an affine function of the sample,

    x0_hat(x) = (1 - gamma) * target[cond] + gamma * blur(x),

so epsilon predictions, activation taps (seeded pooled channel mixes of
x0_hat) and their vector-Jacobian products are all exact and closed
form.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .core import ActivationRecord, FeatureMap
from .errors import CapabilityError, ValidationError
from .guidance import GuidanceContext, energy_gradient

DEFAULT_BETA_MIN = 8.5e-4
DEFAULT_BETA_MAX = 1.2e-2
DEFAULT_VIRTUAL_STEPS = 1000


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions alpha_bar[0..steps], strictly decreasing."""

    steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.array(self.alpha_bar, dtype=np.float64, copy=True)
        if ab.shape != (self.steps + 1,):
            raise ValidationError(
                f"alpha_bar must have steps+1 = {self.steps + 1} entries, got {ab.shape}"
            )
        if ab[0] != 1.0:
            raise ValidationError("alpha_bar[0] must be exactly 1 (no noise)")
        if not ((ab > 0.0) & (ab <= 1.0)).all():
            raise ValidationError("alpha_bar values must lie in (0, 1]")
        if not (np.diff(ab) < 0.0).all():
            raise ValidationError("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @classmethod
    def scaled_linear(cls, steps: int = 50, beta_min: float = DEFAULT_BETA_MIN,
                      beta_max: float = DEFAULT_BETA_MAX,
                      virtual_steps: int = DEFAULT_VIRTUAL_STEPS) -> "NoiseSchedule":
        """Scaled-linear betas over the virtual steps, subsampled to ``steps``."""
        if steps < 1 or virtual_steps < steps:
            raise ValidationError("need virtual_steps >= steps >= 1")
        sqrt_betas = np.linspace(np.sqrt(beta_min), np.sqrt(beta_max), virtual_steps)
        cum = np.cumprod(1.0 - sqrt_betas**2)
        idx = (np.arange(1, steps + 1) * virtual_steps) // steps - 1
        alpha_bar = np.concatenate([[1.0], cum[idx]])
        return cls(steps, alpha_bar)


def forward_noise(x, level: int, eps, sched: NoiseSchedule):
    """Noising: sqrt(ab) * x + sqrt(1 - ab) * eps at the given level."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValidationError(f"sample {x.shape} and noise {eps.shape} shapes differ")
    ab = sched.alpha_bar[level]
    return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic DDIM update from level t down to t_prev (eta = 0)."""
    if t <= t_prev:
        raise ValidationError(f"ddim_step needs t > t_prev, got {t} -> {t_prev}")
    return _ddim_move(x_t, eps_hat, t, t_prev, sched)


def ddim_invert_step(x_t, eps_hat, t: int, t_next: int, sched: NoiseSchedule):
    """Algebraic inverse of :func:`ddim_step`: move from level t up to t_next."""
    if t >= t_next:
        raise ValidationError(f"ddim_invert_step needs t < t_next, got {t} -> {t_next}")
    return _ddim_move(x_t, eps_hat, t, t_next, sched)


def _ddim_move(x, eps_hat, src: int, dst: int, sched: NoiseSchedule):
    x = np.asarray(x, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    ab_src = sched.alpha_bar[src]
    ab_dst = sched.alpha_bar[dst]
    x0_hat = (x - np.sqrt(1.0 - ab_src) * eps_hat) / np.sqrt(ab_src)
    return np.sqrt(ab_dst) * x0_hat + np.sqrt(1.0 - ab_dst) * eps_hat


# ---------------------------------------------------------------------------
# Denoisers


@dataclass(frozen=True)
class DenoiserOutput:
    eps: np.ndarray
    activations: dict


class Denoiser:
    """Conditioned epsilon-prediction with activation taps.

    Implementations must be deterministic: identical inputs produce
    bit-identical outputs.
    """

    guided_layers: tuple = (2, 3)

    @property
    def supports_activation_vjp(self) -> bool:
        return False

    def predict(self, x, level: int, cond: str, depth=None) -> DenoiserOutput:
        raise NotImplementedError

    def activation_vjp(self, x, level: int, cond: str, depth, cotangents) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no activation VJP")


def blur(x: np.ndarray) -> np.ndarray:
    """Separable [0.25, 0.5, 0.25] smoothing with wrap borders (symmetric, exact)."""
    a = np.asarray(x, dtype=np.float64)
    for axis in (-2, -1):
        a = 0.5 * a + 0.25 * np.roll(a, 1, axis=axis) + 0.25 * np.roll(a, -1, axis=axis)
    return a


def _depth_digest(depth) -> str:
    # Coarse statistics, not raw bytes: depth maps that agree to solver
    # tolerance (e.g. an identity edit) must condition identically.
    if depth is None:
        return "none"
    d = np.asarray(depth, dtype=np.float64)
    return f"{d.shape}|{round(float(d.mean()), 3)}|{round(float(d.std()), 3)}"


class MockDenoiser(Denoiser):
    """Analytic denoiser with per-conditioning targets and linear taps."""

    def __init__(self, targets: dict, sched: NoiseSchedule, gamma: float = 0.3,
                 seed: int = 0, guided_layers: tuple = (2, 3),
                 layer_pool: dict | None = None, layer_channels: dict | None = None):
        if not 0.0 <= gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {gamma}")
        self.targets = {k: np.asarray(v, dtype=np.float64) for k, v in targets.items()}
        shapes = {v.shape for v in self.targets.values()}
        if len(shapes) != 1:
            raise ValidationError("all conditioning targets must share one shape")
        self.shape = next(iter(shapes))
        if len(self.shape) != 3:
            raise ValidationError("targets must be (C, H, W)")
        self.sched = sched
        self.gamma = float(gamma)
        self.seed = int(seed)
        self.guided_layers = tuple(guided_layers)
        self.layer_pool = dict(layer_pool or {2: 4, 3: 2})
        self.layer_channels = dict(layer_channels or {2: 8, 3: 8})
        for layer in self.guided_layers:
            f = self.layer_pool[layer]
            if self.shape[1] % f or self.shape[2] % f:
                raise ValidationError(
                    f"sample resolution {self.shape[1]}x{self.shape[2]} is not divisible "
                    f"by the pool factor {f} of layer {layer}"
                )
        self._mix_cache: dict = {}

    @property
    def supports_activation_vjp(self) -> bool:
        return True

    def _mix_matrix(self, layer: int, digest: str) -> np.ndarray:
        key = (layer, digest)
        if key not in self._mix_cache:
            crc = zlib.crc32(digest.encode("utf-8"))
            rng = np.random.default_rng([self.seed, layer, crc])
            c_in = self.shape[0]
            mat = rng.standard_normal((self.layer_channels[layer], c_in)) / np.sqrt(c_in)
            self._mix_cache[key] = mat
        return self._mix_cache[key]

    def _x0_hat(self, x: np.ndarray, cond: str) -> np.ndarray:
        if cond not in self.targets:
            raise ValidationError(f"unknown conditioning {cond!r}")
        return (1.0 - self.gamma) * self.targets[cond] + self.gamma * blur(x)

    def _pool(self, a: np.ndarray, f: int) -> np.ndarray:
        c, h, w = a.shape
        return a.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))

    def _pool_adjoint(self, cot: np.ndarray, f: int) -> np.ndarray:
        up = np.repeat(np.repeat(cot, f, axis=1), f, axis=2)
        return up / (f * f)

    def predict(self, x, level: int, cond: str, depth=None) -> DenoiserOutput:
        a = np.asarray(x, dtype=np.float64)
        if a.shape != self.shape:
            raise ValidationError(f"sample shape {a.shape} does not match {self.shape}")
        x0_hat = self._x0_hat(a, cond)
        digest = _depth_digest(depth)
        acts = {}
        for layer in self.guided_layers:
            pooled = self._pool(x0_hat, self.layer_pool[layer])
            acts[layer] = np.einsum("oc,chw->ohw", self._mix_matrix(layer, digest), pooled)
        ab = self.sched.alpha_bar[level]
        if ab == 1.0:
            eps = np.zeros_like(a)
        else:
            eps = (a - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
        return DenoiserOutput(eps=eps, activations=acts)

    def activation_vjp(self, x, level: int, cond: str, depth, cotangents) -> np.ndarray:
        # x0_hat is affine in x, so the VJP is x-independent: pull the
        # cotangents back through channel mix, pooling, and gamma * blur.
        if np.asarray(x).shape != self.shape:
            raise ValidationError(f"sample shape {np.asarray(x).shape} does not match "
                                  f"{self.shape}")
        digest = _depth_digest(depth)
        grad_x0 = np.zeros(self.shape, dtype=np.float64)
        for layer, cot in cotangents.items():
            cot = np.asarray(cot, dtype=np.float64)
            mat = self._mix_matrix(layer, digest)
            pooled_grad = np.einsum("oc,ohw->chw", mat, cot)
            grad_x0 += self._pool_adjoint(pooled_grad, self.layer_pool[layer])
        return self.gamma * blur(grad_x0)


# ---------------------------------------------------------------------------
# Sampling


def _cfg_combine(eps_y: np.ndarray, eps_null, mu: float) -> np.ndarray:
    if mu == 0.0 or eps_null is None:
        return eps_y
    return (1.0 + mu) * eps_y - mu * eps_null


def guided_epsilon(x_t, step: int, denoiser: Denoiser, cond_y: str, cond_null: str,
                   depth, ctx: GuidanceContext) -> np.ndarray:
    """(1 + mu) eps(y) - mu eps(null) + lambda * grad G."""
    x = np.asarray(x_t, dtype=np.float64)
    sched = ctx.schedule
    level = sched.total_steps - step
    eps_y = denoiser.predict(x, level, cond_y, depth).eps
    eps_null = denoiser.predict(x, level, cond_null, depth).eps if sched.cfg_scale != 0.0 else None
    eps = _cfg_combine(eps_y, eps_null, sched.cfg_scale)
    if ctx.schedule.is_guided(step) and sched.energy_step_size != 0.0:
        eps = eps + sched.energy_step_size * energy_gradient(x, denoiser, ctx, step)
    return eps


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.isfinite(x).all():
        raise ValidationError(f"NaN/Inf in trajectory at sampling step {step}")


def _sample_loop(x_start, denoiser: Denoiser, cond: str, cond_null, depth,
                 sched: NoiseSchedule, mu: float, ctx: GuidanceContext | None,
                 record_into: ActivationRecord | None, energy_log: list | None,
                 trajectory_hook=None) -> np.ndarray:
    x = np.asarray(x_start, dtype=np.float64).copy()
    total = sched.steps
    for step in range(total):
        level = total - step
        g_obj = g_bg = 0.0
        guided = ctx is not None and ctx.schedule.is_guided(step)
        if guided and ctx.guidance_mode == "nudge":
            lam = ctx.schedule.energy_step_size
            for k in range(ctx.schedule.grad_descent_steps):
                grad, go, gb = energy_gradient(x, denoiser, ctx, step, return_energies=True)
                if k == 0:
                    g_obj, g_bg = go, gb
                x = x - lam * grad
                _check_finite(x, step)
        out_y = denoiser.predict(x, level, cond, depth)
        if record_into is not None:
            for layer, act in out_y.activations.items():
                record_into.add(layer, step, FeatureMap(np.asarray(act, np.float32)))
        eps_null = denoiser.predict(x, level, cond_null, depth).eps if mu != 0.0 else None
        eps = _cfg_combine(out_y.eps, eps_null, mu)
        if guided and ctx.guidance_mode == "epsilon":
            grad, g_obj, g_bg = energy_gradient(x, denoiser, ctx, step, return_energies=True)
            eps = eps + ctx.schedule.energy_step_size * grad
        if energy_log is not None:
            energy_log.append((step, g_obj, g_bg))
        x = ddim_step(x, eps, level, level - 1, sched)
        _check_finite(x, step)
        if trajectory_hook is not None:
            trajectory_hook(step, x)
    return x


def ddim_sample(x_T, denoiser: Denoiser, cond: str, depth, sched: NoiseSchedule, *,
                cond_null: str | None = None, mu: float = 0.0,
                record_into: ActivationRecord | None = None,
                trajectory_hook=None) -> np.ndarray:
    """Unguided deterministic sampling from level T down to 0."""
    return _sample_loop(x_T, denoiser, cond, cond_null, depth, sched, mu, None,
                        record_into, None, trajectory_hook)


def sample_guided(x_T, denoiser: Denoiser, conds, depth, ctx: GuidanceContext,
                  sched: NoiseSchedule, *, record_into: ActivationRecord | None = None,
                  energy_log: list | None = None, trajectory_hook=None) -> np.ndarray:
    """Energy-guided sampling; with all weights zero this is bitwise unguided.

    ``conds`` is (conditioned, null-conditioned). In ``nudge`` mode each
    guided step applies ``grad_descent_steps`` descent steps on the
    energy before the DDIM update; in ``epsilon`` mode the scaled
    gradient is folded into the combined noise prediction instead.
    """
    cond_y, cond_null = conds
    if ctx.schedule.total_steps != sched.steps:
        raise ValidationError(
            f"guidance schedule covers {ctx.schedule.total_steps} steps but the noise "
            f"schedule has {sched.steps}"
        )
    return _sample_loop(x_T, denoiser, cond_y, cond_null, depth, sched,
                        ctx.schedule.cfg_scale, ctx, record_into, energy_log,
                        trajectory_hook)


def ddim_invert(x0, denoiser: Denoiser, cond: str, depth, sched: NoiseSchedule):
    """Run DDIM in reverse to the noisiest level, then record activations.

    Returns (x_T, activation record). The record holds the activations
    of the reconstruction pass from x_T, one entry per guided layer and
    sampling step; re-running :func:`ddim_sample` on x_T reproduces the
    reconstruction bit for bit.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    for level in range(sched.steps):
        eps = denoiser.predict(x, level, cond, depth).eps
        x = ddim_invert_step(x, eps, level, level + 1, sched)
        _check_finite(x, level)
    record = ActivationRecord(entries={}, guided_layers=denoiser.guided_layers)
    ddim_sample(x, denoiser, cond, depth, sched, record_into=record)
    return x, record
