"""Edit-adherence and identity-preservation metrics.

Edit adherence is the IoU between the pipeline's warped object mask and
the ground-truth mask of the re-rendered edited scene. Identity
preservation is the cycle-consistency L1: mean absolute difference
between the input image and the result of applying the edit followed by
its inverse. LPIPS needs a trained network and is reported as
unavailable so report layouts stay aligned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FeatureMap, Mask
from .errors import ValidationError
from .formats import read_image_png, read_mask_png


def iou(a: Mask, b: Mask) -> float:
    """Intersection over union; two empty masks count as identical (1.0)."""
    if (a.height, a.width) != (b.height, b.width):
        raise ValidationError(f"mask sizes differ: {a.width}x{a.height} vs "
                              f"{b.width}x{b.height}")
    am, bm = a.as_bool(), b.as_bool()
    union = (am | bm).sum()
    if union == 0:
        return 1.0
    return float((am & bm).sum()) / float(union)


def cycle_consistency_l1(x0: FeatureMap, edited_back: FeatureMap) -> float:
    """Mean absolute difference over all pixels and channels."""
    if x0.data.shape != edited_back.data.shape:
        raise ValidationError(f"image shapes differ: {x0.data.shape} vs "
                              f"{edited_back.data.shape}")
    return float(np.abs(x0.data.astype(np.float64) -
                        edited_back.data.astype(np.float64)).mean())


@dataclass
class EvalReport:
    per_sample: list = field(default_factory=list)
    mean_s_edit: float = 0.0
    mean_e_id_l1: float = 0.0
    count: int = 0
    lpips: str = "unavailable"
    mask_source: str = "pipeline warped object mask (no segmentation network)"

    def to_dict(self) -> dict:
        return {
            "per_sample": self.per_sample,
            "aggregate": {
                "mean_s_edit": self.mean_s_edit,
                "mean_e_id_l1": self.mean_e_id_l1,
                "count": self.count,
            },
            "lpips": self.lpips,
            "mask_source": self.mask_source,
        }

    def to_table(self) -> str:
        """Aligned text table; E_id is rendered x10 as in common reporting."""
        lines = [f"{'sample':<16}{'S_edit':>10}{'E_id_L1 (x10)':>16}"]
        for row in self.per_sample:
            e_id = "-" if row["e_id_l1"] is None else f"{row['e_id_l1'] * 10:.3f}"
            s_edit = "-" if row["s_edit"] is None else f"{row['s_edit']:.3f}"
            lines.append(f"{row['id']:<16}{s_edit:>10}{e_id:>16}")
        lines.append(f"{'mean':<16}{self.mean_s_edit:>10.3f}{self.mean_e_id_l1 * 10:>16.3f}")
        return "\n".join(lines)


def evaluate_benchmark(run_dir, gt_dir) -> EvalReport:
    """Compare a benchmark run against ground truth, sample by sample.

    Expects matching sample_* directories. Per sample the ground-truth
    side holds image.png (original input) and gt_mask.png (edited-scene
    mask); the run side holds m_prime_o.png and cycle/result.png.
    """
    run_dir, gt_dir = Path(run_dir), Path(gt_dir)
    gt_ids = sorted(p.name for p in gt_dir.iterdir() if p.is_dir())
    if not gt_ids:
        raise ValidationError(f"no sample directories found in {gt_dir}")
    missing = [s for s in gt_ids if not (run_dir / s).is_dir()]
    if missing:
        raise ValidationError(f"run directory is missing samples: {missing}")

    report = EvalReport()
    s_vals, e_vals = [], []
    for sid in gt_ids:
        gt_mask = read_mask_png(gt_dir / sid / "gt_mask.png")
        run_mask = read_mask_png(run_dir / sid / "m_prime_o.png")
        s_edit = iou(run_mask, gt_mask)
        s_vals.append(s_edit)
        cycle_path = run_dir / sid / "cycle" / "result.png"
        e_id = None
        if cycle_path.exists():
            original = read_image_png(gt_dir / sid / "image.png")
            e_id = cycle_consistency_l1(original, read_image_png(cycle_path))
            e_vals.append(e_id)
        report.per_sample.append({"id": sid, "s_edit": s_edit, "e_id_l1": e_id})
    report.count = len(gt_ids)
    report.mean_s_edit = float(np.mean(s_vals))
    report.mean_e_id_l1 = float(np.mean(e_vals)) if e_vals else 0.0
    return report


def write_report(report: EvalReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    (out_dir / "report.txt").write_text(report.to_table() + "\n")
