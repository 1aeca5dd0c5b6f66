"""Raster primitives shared by every module.

Conventions used throughout the engine:

- Scalar fields are (H, W) float32, feature maps are (C, H, W) float32
  (channel-major, row-major within a channel), masks are (H, W) uint8
  with values in {0, 1}.
- Normalized image coordinates u live in [0, 1]^2; the center of pixel
  (row r, col c) is at u = ((c + 0.5) / W, (r + 0.5) / H). Row 0 is the
  top of the image.
- Interpolation is bilinear with clamp-to-edge behaviour: coordinate u
  maps to array coordinate u * size - 0.5, clamped to [0, size - 1].

All raster payloads are frozen (numpy write flag cleared) after
construction; operations return fresh objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicateKeyError, ValidationError


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ValidationError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class ScalarField:
    """Single-channel float raster (depth maps, flow components, ...)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"ScalarField needs a (H, W) array, got shape {arr.shape}")
        _require_finite(arr, "ScalarField")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def full(cls, width: int, height: int, value: float) -> "ScalarField":
        return cls(np.full((height, width), value, dtype=np.float32))


@dataclass(frozen=True)
class FeatureMap:
    """C-channel float raster (images, latents, activations)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"FeatureMap needs a (C, H, W) array, got shape {arr.shape}")
        _require_finite(arr, "FeatureMap")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Mask:
    """Binary raster; 1 marks foreground / valid / selected pixels."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        else:
            arr = np.array(arr, dtype=np.uint8, order="C", copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"Mask needs a (H, W) array, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("Mask values must be 0 or 1")
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(arr)))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def count(self) -> int:
        return int(self.data.sum())

    def complement(self) -> "Mask":
        return Mask(1 - self.data)

    @classmethod
    def ones(cls, width: int, height: int) -> "Mask":
        return cls(np.ones((height, width), dtype=np.uint8))

    @classmethod
    def zeros(cls, width: int, height: int) -> "Mask":
        return cls(np.zeros((height, width), dtype=np.uint8))


@dataclass
class ActivationRecord:
    """Map (layer index, step index) -> FeatureMap.

    Steps are sampling steps counted from the start of denoising
    (step 0 is the noisiest). All maps of one layer share a resolution.
    """

    entries: dict = field(default_factory=dict)
    guided_layers: tuple = (2, 3)

    def add(self, layer: int, step: int, fmap: FeatureMap) -> None:
        key = (int(layer), int(step))
        if key in self.entries:
            raise DuplicateKeyError(f"duplicate activation entry for (layer={layer}, step={step})")
        for (other_layer, _), other in self.entries.items():
            if other_layer == key[0] and (other.height, other.width) != (fmap.height, fmap.width):
                raise ValidationError(
                    f"layer {layer} resolution {(fmap.height, fmap.width)} does not match "
                    f"existing entries {(other.height, other.width)}"
                )
        self.entries[key] = fmap

    def get(self, layer: int, step: int) -> FeatureMap:
        return self.entries[(int(layer), int(step))]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return tuple(key) in self.entries

    def layers(self) -> tuple:
        return tuple(sorted({layer for layer, _ in self.entries}))

    def steps(self) -> tuple:
        return tuple(sorted({step for _, step in self.entries}))


# ---------------------------------------------------------------------------
# Bilinear resampling


def _resample_taps(in_size: int, out_size: int):
    """Clamped source taps and fractions for center-aligned bilinear resampling."""
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    centers = np.clip(centers, 0.0, in_size - 1.0)
    i0 = np.floor(centers).astype(np.int64)
    i0 = np.minimum(i0, in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = centers - i0
    return i0, i1, frac


def resample_array(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resampling of a (..., H, W) array; returns float64."""
    if out_w < 1 or out_h < 1:
        raise ValidationError(f"output size must be positive, got {out_w}x{out_h}")
    a = np.asarray(arr, dtype=np.float64)
    in_h, in_w = a.shape[-2], a.shape[-1]
    x0, x1, fx = _resample_taps(in_w, out_w)
    y0, y1, fy = _resample_taps(in_h, out_h)
    top = a[..., y0, :][..., :, x0] * (1.0 - fx) + a[..., y0, :][..., :, x1] * fx
    bot = a[..., y1, :][..., :, x0] * (1.0 - fx) + a[..., y1, :][..., :, x1] * fx
    return top * (1.0 - fy)[:, None] + bot * fy[:, None]


def resample_array_adjoint(cot: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Exact adjoint of :func:`resample_array` (scatter of the tap weights)."""
    c = np.asarray(cot, dtype=np.float64)
    out_h, out_w = c.shape[-2], c.shape[-1]
    x0, x1, fx = _resample_taps(in_w, out_w)
    y0, y1, fy = _resample_taps(in_h, out_h)
    lead = c.shape[:-2]
    out = np.zeros(lead + (in_h, in_w), dtype=np.float64)
    yy0 = np.broadcast_to(y0[:, None], (out_h, out_w))
    yy1 = np.broadcast_to(y1[:, None], (out_h, out_w))
    xx0 = np.broadcast_to(x0[None, :], (out_h, out_w))
    xx1 = np.broadcast_to(x1[None, :], (out_h, out_w))
    wfy = np.broadcast_to(fy[:, None], (out_h, out_w))
    wfx = np.broadcast_to(fx[None, :], (out_h, out_w))
    flat = out.reshape(-1, in_h, in_w)
    cflat = c.reshape(-1, out_h, out_w)
    for k in range(flat.shape[0]):
        np.add.at(flat[k], (yy0, xx0), cflat[k] * (1 - wfy) * (1 - wfx))
        np.add.at(flat[k], (yy0, xx1), cflat[k] * (1 - wfy) * wfx)
        np.add.at(flat[k], (yy1, xx0), cflat[k] * wfy * (1 - wfx))
        np.add.at(flat[k], (yy1, xx1), cflat[k] * wfy * wfx)
    return flat.reshape(lead + (in_h, in_w))


def resample_bilinear(src: FeatureMap, out_w: int, out_h: int) -> FeatureMap:
    """Bilinear resampling with pixel centers at (i + 0.5) / size and edge clamp."""
    return FeatureMap(resample_array(src.data, out_w, out_h).astype(np.float32))


def _coverage_bounds(out_size: int, in_size: int):
    """Inclusive source-pixel index range covered by each output pixel.

    Output pixel c spans [c * in/out, (c+1) * in/out) in source pixel
    units; the bounds are computed with integer arithmetic so exact
    boundary alignment never flips on float rounding.
    """
    c = np.arange(out_size, dtype=np.int64)
    lo = (c * in_size) // out_size
    hi = ((c + 1) * in_size - 1) // out_size
    return lo, np.minimum(hi, in_size - 1)


def block_any(src_bool: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """True where any source pixel covered by the output pixel is True."""
    src = np.asarray(src_bool, dtype=np.int64)
    in_h, in_w = src.shape
    integral = np.zeros((in_h + 1, in_w + 1), dtype=np.int64)
    integral[1:, 1:] = src.cumsum(0).cumsum(1)
    ylo, yhi = _coverage_bounds(out_h, in_h)
    xlo, xhi = _coverage_bounds(out_w, in_w)
    y0, y1 = ylo[:, None], yhi[:, None] + 1
    x0, x1 = xlo[None, :], xhi[None, :] + 1
    total = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    return total > 0


def _nearest_indices(out_size: int, in_size: int) -> np.ndarray:
    # Nearest source center with ties broken toward the lower index.
    centers = (2 * np.arange(out_size, dtype=np.float64) + 1) * in_size / (2 * out_size)
    idx = np.ceil(centers - 1.0).astype(np.int64)
    return np.clip(idx, 0, in_size - 1)


def resample_mask(src: Mask, out_w: int, out_h: int, mode: str = "nearest") -> Mask:
    """Resample a binary mask.

    ``nearest`` samples the closest source pixel; ``conservative`` marks
    an output pixel 1 iff any source pixel covered by it is 1 (a
    foreground pixel can never be lost by downsampling).
    """
    if out_w < 1 or out_h < 1:
        raise ValidationError(f"output size must be positive, got {out_w}x{out_h}")
    if mode == "nearest":
        rows = _nearest_indices(out_h, src.height)
        cols = _nearest_indices(out_w, src.width)
        return Mask(src.data[np.ix_(rows, cols)])
    if mode == "conservative":
        return Mask(block_any(src.as_bool(), out_w, out_h).astype(np.uint8))
    raise ValidationError(f"unknown mask resampling mode: {mode!r}")
