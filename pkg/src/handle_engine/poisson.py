"""Gradient-domain compositing on the 5-point Laplacian.

The discrete system solves  lap(x) = div(g)  for the unknown pixels of
a region, reading Dirichlet values from the boundary field everywhere
else. Image borders are mirrored, which simply drops the out-of-image
neighbor terms. Gradients use forward differences (zero at the last
column/row) and divergence the matching backward differences, so
div(grad(f)) reproduces the mirrored Laplacian exactly.

The solver is Jacobi-preconditioned conjugate gradient with float64
accumulators; it returns the best-residual iterate, so the reported
residual history is non-increasing even when raw CG residuals
transiently wobble.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Mask, ScalarField
from .errors import ConvergenceError, ValidationError

DEFAULT_TOL = 1e-8


@dataclass
class PoissonProblem:
    """Unknown region, per-pixel guidance gradients, Dirichlet boundary field."""

    region: Mask
    guidance_x: np.ndarray
    guidance_y: np.ndarray
    boundary: ScalarField

    def __post_init__(self):
        shape = (self.region.height, self.region.width)
        self.guidance_x = np.asarray(self.guidance_x, dtype=np.float64)
        self.guidance_y = np.asarray(self.guidance_y, dtype=np.float64)
        if self.guidance_x.shape != shape or self.guidance_y.shape != shape:
            raise ValidationError("guidance field does not match region resolution")
        if (self.boundary.height, self.boundary.width) != shape:
            raise ValidationError("boundary field does not match region resolution")
        if self.region.count() == 0:
            raise ValidationError("Poisson region is empty")


def gradient(field: np.ndarray):
    """Forward-difference gradient with mirrored borders (zero last col/row)."""
    f = np.asarray(field, dtype=np.float64)
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[:, :-1] = f[:, 1:] - f[:, :-1]
    gy[:-1, :] = f[1:, :] - f[:-1, :]
    return gx, gy


def divergence(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Backward-difference divergence matching :func:`gradient`."""
    div = np.array(gx, dtype=np.float64, copy=True)
    div[:, 1:] -= gx[:, :-1]
    div += gy
    div[1:, :] -= gy[:-1, :]
    return div


def _neighbor_sum(img: np.ndarray) -> np.ndarray:
    """Sum of in-image 4-neighbors (mirror border: missing terms dropped)."""
    out = np.zeros_like(img)
    out[:, 1:] += img[:, :-1]
    out[:, :-1] += img[:, 1:]
    out[1:, :] += img[:-1, :]
    out[:-1, :] += img[1:, :]
    return out


def _degree(h: int, w: int) -> np.ndarray:
    deg = np.full((h, w), 4.0)
    deg[0, :] -= 1.0
    deg[-1, :] -= 1.0
    deg[:, 0] -= 1.0
    deg[:, -1] -= 1.0
    return deg


def _check_boundary_contact(region: np.ndarray) -> None:
    labels, count = ndimage.label(region, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    contact = region & (_neighbor_sum((~region).astype(np.float64)) > 0)
    reachable = set(np.unique(labels[contact]))
    for lbl in range(1, count + 1):
        if lbl not in reachable:
            raise ValidationError(
                "Poisson region has a component with no boundary data "
                "(it covers the image or an enclosed area completely)"
            )


def solve(problem: PoissonProblem, tol: float = DEFAULT_TOL, max_iter: int | None = None):
    """Solve the masked Poisson system; returns the composited field.

    Raises ConvergenceError (carrying the final relative residual) if
    the tolerance is not met within ``max_iter`` iterations (default
    10x the number of unknowns).
    """
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    region = problem.region.as_bool()
    _check_boundary_contact(region)
    h, w = region.shape
    n = int(region.sum())
    if max_iter is None:
        max_iter = 10 * n

    deg = _degree(h, w)
    rhs = -divergence(problem.guidance_x, problem.guidance_y)
    fixed = np.where(region, 0.0, problem.boundary.data.astype(np.float64))
    b = (rhs + _neighbor_sum(fixed))[region]

    def apply_a(vec):
        img = np.zeros((h, w))
        img[region] = vec
        out = deg * img - _neighbor_sum(np.where(region, img, 0.0))
        return out[region]

    b_norm = float(np.linalg.norm(b))
    x = np.zeros(n)
    history = []
    if b_norm == 0.0:
        history.append(0.0)
    else:
        inv_diag = 1.0 / deg[region]
        r = b - apply_a(x)
        z = inv_diag * r
        p = z.copy()
        rz = float(r @ z)
        best_x = x.copy()
        best_res = float(np.linalg.norm(r)) / b_norm
        history.append(best_res)
        it = 0
        while best_res > tol:
            if it >= max_iter:
                raise ConvergenceError(
                    f"PCG did not converge in {max_iter} iterations "
                    f"(relative residual {best_res:.3e})",
                    residual=best_res,
                    iterations=it,
                )
            ap = apply_a(p)
            denom = float(p @ ap)
            if denom == 0.0:
                raise ConvergenceError("PCG stalled (zero curvature)", residual=best_res,
                                       iterations=it)
            alpha = rz / denom
            x = x + alpha * p
            r = r - alpha * ap
            res = float(np.linalg.norm(r)) / b_norm
            if res < best_res:
                best_res = res
                best_x = x.copy()
            history.append(best_res)
            z = inv_diag * r
            rz_next = float(r @ z)
            p = z + (rz_next / rz) * p
            rz = rz_next
            it += 1
        x = best_x

    out = np.where(region, 0.0, problem.boundary.data.astype(np.float64))
    out[region] = x
    field = ScalarField(out.astype(np.float32))
    return field, tuple(history)


def seamless_composite(fg: ScalarField, bg: ScalarField, region: Mask,
                       tol: float = DEFAULT_TOL) -> ScalarField:
    """Clone fg into bg over the region, matching bg at the region boundary."""
    if (fg.height, fg.width) != (bg.height, bg.width):
        raise ValidationError("foreground and background sizes differ")
    gx, gy = gradient(fg.data)
    field, _ = solve(PoissonProblem(region, gx, gy, bg), tol=tol)
    return field


def harmonic_infill(field: ScalarField, holes: Mask, tol: float = DEFAULT_TOL) -> ScalarField:
    """Fill the hole pixels harmonically from the surrounding field."""
    if (holes.height, holes.width) != (field.height, field.width):
        raise ValidationError("hole mask does not match field resolution")
    if holes.count() == 0:
        return ScalarField(field.data)
    zeros = np.zeros((field.height, field.width))
    out, _ = solve(PoissonProblem(holes, zeros, zeros, field), tol=tol)
    return out
