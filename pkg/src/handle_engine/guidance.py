"""Guidance energies over edited denoiser activations.

The object energy matches activations pointwise inside the warped
object mask; the background energy matches masked spatial sums (scaled
by the mask area) so the static scene may still shift locally. Both are
gated by a schedule that stops guiding after a cutoff step and cycles
through the guided layers phase by phase.

Activations are compared at one canonical resolution: recorded maps are
bilinearly resampled there before warping, and the live activations are
resampled the same way before the energies (their gradient chains back
through the exact adjoint of that resampling).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import flow as flowmod
from .core import (
    ActivationRecord,
    FeatureMap,
    Mask,
    resample_array,
    resample_array_adjoint,
    resample_mask,
)
from .errors import CapabilityError, ValidationError

logger = logging.getLogger(__name__)

BG_ENERGY_MODES = ("per-channel", "vector-norm")
DEFAULT_LAYER_CYCLE = ((3,), (2,), (2, 3))
DEFAULT_CANONICAL_RES = 64


@dataclass(frozen=True)
class GuidanceSchedule:
    """Per-step, per-layer guidance weights plus sampler knobs.

    Steps count from the start of denoising (step 0 is the noisiest);
    steps at or past ``cutoff_step`` get zero weight. Within the guided
    range, layer i is active at step t iff i is in
    ``layer_cycle[t % len(layer_cycle)]``.
    """

    total_steps: int = 50
    cutoff_step: int = 38
    layer_cycle: tuple = DEFAULT_LAYER_CYCLE
    w_obj: float = 1.0
    w_bg: float = 1.0
    energy_step_size: float = 1.0  # lambda
    cfg_scale: float = 0.0  # mu
    grad_descent_steps: int = 3

    def __post_init__(self):
        object.__setattr__(
            self, "layer_cycle", tuple(tuple(sorted(phase)) for phase in self.layer_cycle)
        )
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if not 0 <= self.cutoff_step <= self.total_steps:
            raise ValidationError("cutoff_step must lie in [0, total_steps]")
        if self.w_obj < 0 or self.w_bg < 0:
            raise ValidationError("guidance weights must be nonnegative")
        if not self.layer_cycle or any(len(p) == 0 for p in self.layer_cycle):
            raise ValidationError("layer_cycle phases must be nonempty")
        if self.grad_descent_steps < 0:
            raise ValidationError("grad_descent_steps must be >= 0")

    def active_layers(self, step: int) -> tuple:
        if step >= self.cutoff_step:
            return ()
        return self.layer_cycle[step % len(self.layer_cycle)]

    def object_weight(self, layer: int, step: int) -> float:
        return self.w_obj if layer in self.active_layers(step) else 0.0

    def background_weight(self, layer: int, step: int) -> float:
        return self.w_bg if layer in self.active_layers(step) else 0.0

    def is_guided(self, step: int) -> bool:
        return bool(self.active_layers(step)) and (self.w_obj > 0 or self.w_bg > 0)


@dataclass
class GuidanceContext:
    """Everything the sampler needs to evaluate the guidance energy."""

    edited: ActivationRecord
    object_mask: np.ndarray  # float {0,1} at canonical resolution
    background_mask: np.ndarray
    schedule: GuidanceSchedule
    cond: str = "y"
    depth: np.ndarray | None = None
    bg_energy: str = "per-channel"
    canonical_res: int = DEFAULT_CANONICAL_RES
    guidance_mode: str = "nudge"

    def __post_init__(self):
        self.object_mask = np.asarray(self.object_mask, dtype=np.float64)
        self.background_mask = np.asarray(self.background_mask, dtype=np.float64)
        shape = (self.canonical_res, self.canonical_res)
        if self.object_mask.shape != shape or self.background_mask.shape != shape:
            raise ValidationError("guidance masks must match the canonical resolution")
        if self.bg_energy not in BG_ENERGY_MODES:
            raise ValidationError(f"unknown bg-energy mode {self.bg_energy!r}")
        if self.guidance_mode not in ("nudge", "epsilon"):
            raise ValidationError(f"unknown guidance mode {self.guidance_mode!r}")
        for (layer, step), fmap in self.edited.entries.items():
            if (fmap.height, fmap.width) != shape:
                raise ValidationError(
                    f"edited activation (layer={layer}, step={step}) is not at the "
                    f"canonical resolution {self.canonical_res}"
                )


def edit_activations(record: ActivationRecord, flow: flowmod.FlowField,
                     canonical_res: int = DEFAULT_CANONICAL_RES) -> ActivationRecord:
    """Resample every guided activation to the canonical resolution and warp it."""
    steps = record.steps()
    missing = [
        (layer, step)
        for layer in record.guided_layers
        for step in steps
        if (layer, step) not in record
    ]
    if missing:
        raise ValidationError(f"activation record is missing guided entries: {missing}")
    for layer in record.guided_layers:
        res = record.get(layer, steps[0]) if steps else None
        if res is not None and max(res.height, res.width) > canonical_res:
            raise ValidationError(
                f"canonical resolution {canonical_res} is below layer {layer} "
                f"resolution {res.width}x{res.height}"
            )
    if (flow.height, flow.width) != (canonical_res, canonical_res):
        flow = flowmod.resample_flow(flow, canonical_res, canonical_res)
    edited = ActivationRecord(entries={}, guided_layers=record.guided_layers)
    for layer in record.guided_layers:
        for step in steps:
            fmap = record.get(layer, step)
            canon = resample_array(fmap.data, canonical_res, canonical_res)
            warped = flowmod.warp_array(canon, flow)
            edited.add(layer, step, FeatureMap(warped.astype(np.float32)))
    return edited


def canonicalize_activations(acts, canonical_res: int) -> dict:
    """Bilinearly resample live activations to the canonical resolution."""
    out = {}
    for layer, arr in acts.items():
        a = np.asarray(arr, dtype=np.float64)
        if a.shape[-2:] == (canonical_res, canonical_res):
            out[layer] = a
        else:
            out[layer] = resample_array(a, canonical_res, canonical_res)
    return out


def _layer_terms(psi_e, ctx: GuidanceContext, step: int):
    for layer in ctx.schedule.active_layers(step):
        if layer not in psi_e:
            raise ValidationError(f"live activations are missing guided layer {layer}")
        if (layer, step) not in ctx.edited:
            raise ValidationError(f"edited activations are missing (layer={layer}, step={step})")
        live = np.asarray(psi_e[layer], dtype=np.float64)
        target = ctx.edited.get(layer, step).data.astype(np.float64)
        if live.shape != target.shape:
            raise ValidationError(
                f"layer {layer} activation shape {live.shape} does not match the "
                f"edited target {target.shape}"
            )
        yield layer, live, target


def energy_object(psi_e, ctx: GuidanceContext, step: int) -> float:
    """Sum of masked squared activation differences over the guided layers."""
    total = 0.0
    mask = ctx.object_mask
    for layer, live, target in _layer_terms(psi_e, ctx, step):
        w = ctx.schedule.object_weight(layer, step)
        if w == 0.0:
            continue
        diff = (live - target) * mask
        total += w * float((diff * diff).sum())
    return total


def energy_background(psi_e, ctx: GuidanceContext, step: int) -> float:
    """Squared differences of mask-summed activations, scaled by the mask area."""
    mask = ctx.background_mask
    area = float(mask.sum())
    total = 0.0
    for layer, live, target in _layer_terms(psi_e, ctx, step):
        w = ctx.schedule.background_weight(layer, step)
        if w == 0.0:
            continue
        if area == 0.0:
            logger.warning("background mask is empty; background energy skipped")
            return 0.0
        delta = (live * mask).sum(axis=(-2, -1)) - (target * mask).sum(axis=(-2, -1))
        if ctx.bg_energy == "per-channel":
            total += w * float((delta * delta).sum()) / area
        else:  # vector-norm: squared norm of the true mean-difference vector
            total += w * float((delta * delta).sum()) / (area * area)
    return total


def energy_total(psi_e, ctx: GuidanceContext, step: int) -> float:
    return energy_object(psi_e, ctx, step) + energy_background(psi_e, ctx, step)


def energy_gradient(x_t, denoiser, ctx: GuidanceContext, step: int, *,
                    return_energies: bool = False):
    """Gradient of the total energy with respect to the sample x_t.

    The analytic energy gradients (w.r.t. the canonical activations)
    are pulled back through the resampling adjoint and the denoiser's
    activation VJP. Steps past the cutoff and inactive layers contribute
    exactly zero.
    """
    x = np.asarray(x_t, dtype=np.float64)
    level = ctx.schedule.total_steps - step
    if not ctx.schedule.is_guided(step):
        return (np.zeros_like(x), 0.0, 0.0) if return_energies else np.zeros_like(x)
    if not denoiser.supports_activation_vjp:
        raise CapabilityError("denoiser does not support activation VJPs")

    out = denoiser.predict(x, level, ctx.cond, ctx.depth)
    native = {l: out.activations[l] for l in ctx.schedule.active_layers(step)
              if l in out.activations}
    psi_canon = canonicalize_activations(native, ctx.canonical_res)

    obj_mask = ctx.object_mask
    bg_mask = ctx.background_mask
    area = float(bg_mask.sum())
    g_obj = 0.0
    g_bg = 0.0
    cotangents = {}
    for layer, live, target in _layer_terms(psi_canon, ctx, step):
        w_o = ctx.schedule.object_weight(layer, step)
        w_b = ctx.schedule.background_weight(layer, step)
        cot = np.zeros_like(live)
        if w_o > 0.0:
            diff = (live - target) * obj_mask
            g_obj += w_o * float((diff * diff).sum())
            cot += 2.0 * w_o * diff * obj_mask
        if w_b > 0.0 and area > 0.0:
            delta = (live * bg_mask).sum(axis=(-2, -1)) - (target * bg_mask).sum(axis=(-2, -1))
            if ctx.bg_energy == "per-channel":
                g_bg += w_b * float((delta * delta).sum()) / area
                cot += (2.0 * w_b / area) * delta[:, None, None] * bg_mask
            else:
                g_bg += w_b * float((delta * delta).sum()) / (area * area)
                cot += (2.0 * w_b / (area * area)) * delta[:, None, None] * bg_mask
        native_shape = np.asarray(native[layer]).shape
        cotangents[layer] = resample_array_adjoint(cot, native_shape[-2], native_shape[-1])

    grad = denoiser.activation_vjp(x, level, ctx.cond, ctx.depth, cotangents)
    grad = np.asarray(grad, dtype=np.float64)
    if return_energies:
        return grad, g_obj, g_bg
    return grad


def make_context(edited: ActivationRecord, warped_object_mask: Mask,
                 canonical_valid: Mask, schedule: GuidanceSchedule, *,
                 cond: str = "y", depth=None, bg_energy: str = "per-channel",
                 canonical_res: int = DEFAULT_CANONICAL_RES,
                 guidance_mode: str = "nudge") -> GuidanceContext:
    """Assemble a guidance context from pipeline artifacts.

    The warped object mask (image resolution) is brought to the
    canonical resolution and intersected with the canonical flow
    validity so holes are never guided; the background mask is its
    complement.
    """
    m_obj = resample_mask(warped_object_mask, canonical_res, canonical_res, "nearest")
    if (canonical_valid.height, canonical_valid.width) != (canonical_res, canonical_res):
        canonical_valid = resample_mask(canonical_valid, canonical_res, canonical_res,
                                        "nearest")
    obj = (m_obj.as_bool() & canonical_valid.as_bool()).astype(np.float64)
    return GuidanceContext(
        edited=edited,
        object_mask=obj,
        background_mask=1.0 - obj,
        schedule=schedule,
        cond=cond,
        depth=depth,
        bg_energy=bg_energy,
        canonical_res=canonical_res,
        guidance_mode=guidance_mode,
    )
