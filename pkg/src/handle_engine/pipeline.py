"""End-to-end orchestration: invert, edit, benchmark, evaluate.

The three-phase workflow: (1) invert the input image with the analytic
denoiser and record activations; (2) build the 3D-aware flow from the
depth edit, warp activations and depth; (3) re-generate from the
inverted noise, guided by the warped activations and conditioned on the
edited depth. The mock denoiser is constructed from the run inputs: the
conditioned target is the input image itself, the null target a blurred
copy, so inversion/reconstruction behave like a faithful generator
without any trained weights.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import depth_edit as depth_edit_mod
from . import diffusion, flow as flowmod, geometry, guidance, metrics, scenes
from .config import EditConfig, from_dict, write_resolved
from .core import ActivationRecord, FeatureMap, Mask, ScalarField
from .errors import ConfigError, EngineError, ValidationError
from .formats import (
    read_activation_record,
    read_image_png,
    read_mask_png,
    read_pfm,
    write_activation_record,
    write_image_png,
    write_mask_png,
    write_pfm,
)

THREADS_ENV = "HANDLE_ENGINE_THREADS"


def worker_count(n_tasks: int) -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        workers = max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return min(workers, n_tasks)


# ---------------------------------------------------------------------------
# Shared helpers


def write_channel_pfms(array: np.ndarray, out_dir: Path, stem: str) -> None:
    arr = np.asarray(array, dtype=np.float32)
    for k in range(arr.shape[0]):
        write_pfm(ScalarField(arr[k]), out_dir / f"{stem}.c{k}.pfm")


def read_channel_pfms(out_dir: Path, stem: str) -> np.ndarray | None:
    paths = sorted(out_dir.glob(f"{stem}.c*.pfm"),
                   key=lambda p: int(p.name.split(".c")[1].split(".")[0]))
    if not paths:
        return None
    return np.stack([read_pfm(p).data for p in paths])


def load_inputs(cfg: EditConfig):
    cam = geometry.CameraIntrinsics(cfg.camera["fov_h_deg"], cfg.camera["width"],
                                    cfg.camera["height"])
    depth = read_pfm(cfg.paths["depth"])
    image = read_image_png(cfg.paths["image"])
    mask = read_mask_png(cfg.paths["mask"])
    if (depth.height, depth.width) != (cam.height, cam.width):
        raise ConfigError(
            f"depth resolution {depth.width}x{depth.height} does not match camera "
            f"config {cam.width}x{cam.height}"
        )
    if (image.height, image.width) != (depth.height, depth.width):
        raise ConfigError("image resolution does not match depth resolution")
    if (mask.height, mask.width) != (depth.height, depth.width):
        raise ConfigError("mask resolution does not match depth resolution")
    provided_bg = None
    if cfg.paths.get("background_depth"):
        provided_bg = read_pfm(cfg.paths["background_depth"])
    return cam, depth, image, mask, provided_bg


def build_denoiser(cfg: EditConfig, image: FeatureMap,
                   sched: diffusion.NoiseSchedule) -> diffusion.MockDenoiser:
    target = image.data.astype(np.float64)
    return diffusion.MockDenoiser(
        targets={"y": target, "null": diffusion.blur(target)},
        sched=sched,
        gamma=cfg.engine["gamma"],
        seed=cfg.seed,
    )


def resolve_transform(cfg: EditConfig, depth: ScalarField,
                      cam: geometry.CameraIntrinsics, mask: Mask):
    """Turn the config transform into a camera-space rigid edit.

    Returns (transform, resolved spec dict) with a numeric pivot: the
    symbolic "centroid" pivot becomes the centroid of the lifted masked
    points.
    """
    t = cfg.transform
    pivot = t["pivot"]
    if isinstance(pivot, str):
        if pivot != "centroid":
            raise ConfigError(f"unknown pivot {pivot!r} (use \"centroid\" or 3 floats)")
        pivot_vec = geometry.masked_centroid(geometry.lift(depth, cam), mask)
    else:
        pivot_vec = np.asarray(pivot, dtype=np.float64).reshape(3)
    edit = geometry.RigidTransform.from_axis_angle(
        t["axis"], t["angle_deg"], translation=t["translation"], pivot=pivot_vec
    )
    spec = {
        "axis": [float(v) for v in t["axis"]],
        "angle_deg": float(t["angle_deg"]),
        "translation": [float(v) for v in t["translation"]],
        "pivot": [float(v) for v in pivot_vec],
    }
    return edit, spec


def invert_transform_spec(spec: dict) -> dict:
    """Inverse edit in the same axis/angle/translation/pivot encoding."""
    rot = geometry.RigidTransform.from_axis_angle(spec["axis"], spec["angle_deg"]).rotation
    t = np.asarray(spec["translation"], dtype=np.float64)
    return {
        "axis": list(spec["axis"]),
        "angle_deg": -float(spec["angle_deg"]),
        "translation": [float(v) for v in -(rot.T @ t)],
        "pivot": list(spec["pivot"]),
    }


# ---------------------------------------------------------------------------
# Commands


def run_invert(cfg: EditConfig, *, report_reconstruction: bool = False) -> dict:
    """Invert the input image; writes the xT PFM set and activations.dhar."""
    out_dir = Path(cfg.paths["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _, depth, image, _, _ = load_inputs(cfg)
    sched = diffusion.NoiseSchedule.scaled_linear(cfg.schedule["total_steps"])
    denoiser = build_denoiser(cfg, image, sched)
    depth_arr = depth.data.astype(np.float64)
    x_t, record = diffusion.ddim_invert(image.data.astype(np.float64), denoiser, "y",
                                        depth_arr, sched)
    write_channel_pfms(x_t, out_dir, "xT")
    write_activation_record(record, out_dir / "activations.dhar")
    write_resolved(cfg, out_dir / "config.resolved.json")
    summary = {"steps": sched.steps, "entries": len(record)}
    if report_reconstruction:
        recon = diffusion.ddim_sample(x_t, denoiser, "y", depth_arr, sched)
        err = float(np.abs(recon - image.data.astype(np.float64)).max())
        summary["reconstruction_max_abs_error"] = err
    (out_dir / "invert.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    return summary


def _load_or_run_inversion(cfg, out_dir, denoiser, image, depth_arr, sched,
                           persist: bool):
    x_t = read_channel_pfms(out_dir, "xT")
    record_path = out_dir / "activations.dhar"
    if x_t is not None and record_path.is_file():
        return x_t.astype(np.float64), read_activation_record(record_path)
    x_t, record = diffusion.ddim_invert(image.data.astype(np.float64), denoiser, "y",
                                        depth_arr, sched)
    if persist:
        write_channel_pfms(x_t, out_dir, "xT")
        write_activation_record(record, record_path)
    return x_t, record


def run_edit(cfg: EditConfig, *, dump_trajectory: bool = False,
             persist_inversion: bool = True) -> dict:
    """Full edit pipeline; writes the edited image, depth, masks, and logs."""
    out_dir = Path(cfg.paths["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cam, depth, image, mask, provided_bg = load_inputs(cfg)
    flags = cfg.flags
    sched = diffusion.NoiseSchedule.scaled_linear(cfg.schedule["total_steps"])
    gsched = cfg.guidance_schedule()
    denoiser = build_denoiser(cfg, image, sched)
    depth_arr = depth.data.astype(np.float64)

    x_t, record = _load_or_run_inversion(cfg, out_dir, denoiser, image, depth_arr,
                                         sched, persist_inversion)

    edit, spec = resolve_transform(cfg, depth, cam, mask)
    result = depth_edit_mod.edit_depth(
        depth, cam, edit, mask, provided_bg,
        convention=flags["depth_convention"],
        footprint_2x2=flags["splat_footprint"],
        validity_erosion=flags["validity_erosion"],
    )

    canonical = cfg.engine["canonical_res"]
    flow_canon = flowmod.resample_flow(result.flow, canonical, canonical)
    edited_acts = guidance.edit_activations(record, flow_canon, canonical)
    d_prime_arr = result.edited_depth.data.astype(np.float64)
    ctx = guidance.make_context(
        edited_acts, result.warped_object_mask, flow_canon.valid, gsched,
        cond="y", depth=d_prime_arr, bg_energy=flags["bg_energy"],
        canonical_res=canonical, guidance_mode=flags["guidance_mode"],
    )

    energy_log: list = []
    trajectory_hook = None
    if dump_trajectory:
        traj_dir = out_dir / "trajectory"
        traj_dir.mkdir(exist_ok=True)

        def trajectory_hook(step, x):
            write_channel_pfms(x, traj_dir, f"step_{step:03d}")

    edited = diffusion.sample_guided(x_t, denoiser, ("y", "null"), d_prime_arr, ctx,
                                     sched, energy_log=energy_log,
                                     trajectory_hook=trajectory_hook)

    write_image_png(FeatureMap(np.clip(edited, 0.0, 1.0).astype(np.float32)),
                    out_dir / "result.png")
    write_channel_pfms(edited, out_dir, "result")
    write_pfm(result.edited_depth, out_dir / "d_prime.pfm")
    write_mask_png(result.warped_object_mask, out_dir / "m_prime_o.png")
    write_mask_png(result.background_mask, out_dir / "m_prime_b.png")
    write_mask_png(result.valid_mask, out_dir / "m_v.png")
    write_pfm(ScalarField(result.flow.du), out_dir / "flow.u.pfm")
    write_pfm(ScalarField(result.flow.dv), out_dir / "flow.v.pfm")
    with open(out_dir / "guidance_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "g_obj", "g_bg"])
        writer.writerows([(s, f"{go:.10e}", f"{gb:.10e}") for s, go, gb in energy_log])
    write_resolved(cfg, out_dir / "config.resolved.json")
    (out_dir / "transform.json").write_text(json.dumps(spec, sort_keys=True) + "\n")
    return {"output_dir": str(out_dir), "transform": spec}


# ---------------------------------------------------------------------------
# Benchmark


def run_bench_generate(out_dir, n: int, seed: int, delta: float = 0.3, *,
                       resolution: int = 128, fov_deg: float = 55.0) -> list:
    """Generate n constrained benchmark samples with ground-truth renders."""
    out_dir = Path(out_dir)
    samples = scenes.sample_benchmark(n, seed, delta, resolution=resolution,
                                      fov_deg=fov_deg)
    ids = []
    for i, sample in enumerate(samples):
        sid = f"sample_{i:03d}"
        sdir = out_dir / sid
        sdir.mkdir(parents=True, exist_ok=True)
        depth, image, mask = scenes.render(sample.scene)
        gt_depth, _, gt_mask = scenes.render_edited(sample.scene, sample.edit)
        write_pfm(depth, sdir / "depth.pfm")
        write_image_png(image, sdir / "image.png")
        write_mask_png(mask, sdir / "mask.png")
        write_pfm(gt_depth, sdir / "gt_depth.pfm")
        write_mask_png(gt_mask, sdir / "gt_mask.png")
        (sdir / "edit.json").write_text(json.dumps({
            "transform": sample.edit_spec,
            "scene": scenes.scene_to_dict(sample.scene),
            "disocclusion_fraction": sample.disocclusion_fraction,
            "seed": seed,
            "delta": delta,
        }, indent=2, sort_keys=True) + "\n")
        ids.append(sid)
    return ids


def _bench_sample_config(camera: dict, transform: dict, in_dir: Path, run_dir: Path,
                         seed: int, overrides: dict, *,
                         depth="depth.pfm", image="image.png", mask="mask.png"):
    data = {
        "camera": camera,
        "transform": transform,
        "paths": {
            "depth": str(in_dir / depth),
            "image": str(in_dir / image),
            "mask": str(in_dir / mask),
            "output_dir": str(run_dir),
        },
        "seed": seed,
    }
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    return from_dict(data)


def run_bench_sample(sample_dir, run_dir, seed: int, overrides: dict | None = None) -> dict:
    """Forward edit plus inverse-edit cycle for one benchmark sample."""
    sample_dir, run_dir = Path(sample_dir), Path(run_dir)
    overrides = overrides or {}
    meta = json.loads((sample_dir / "edit.json").read_text())
    spec = meta["transform"]
    camera = meta["scene"]["camera"]
    cfg = _bench_sample_config(camera, spec, sample_dir, run_dir, seed, overrides)
    run_edit(cfg, persist_inversion=False)
    cyc_cfg = _bench_sample_config(
        camera, invert_transform_spec(spec), run_dir, run_dir / "cycle", seed, overrides,
        depth="d_prime.pfm", image="result.png", mask="m_prime_o.png",
    )
    run_edit(cyc_cfg, persist_inversion=False)
    return {"id": sample_dir.name, "status": "ok"}


def _bench_worker(args):
    sample_dir, run_dir, seed, overrides = args
    try:
        return run_bench_sample(sample_dir, run_dir, seed, overrides)
    except EngineError as exc:
        return {"id": Path(sample_dir).name, "status": "error", "message": str(exc)}


def run_bench_run(bench_dir, out_dir, seed: int = 0,
                  overrides: dict | None = None) -> list:
    """Run the edit pipeline (and its inverse cycle) over every sample."""
    bench_dir, out_dir = Path(bench_dir), Path(out_dir)
    sample_dirs = sorted(p for p in bench_dir.iterdir() if p.is_dir())
    if not sample_dirs:
        raise ValidationError(f"no sample directories in {bench_dir}")
    tasks = [(str(s), str(out_dir / s.name), seed, overrides or {}) for s in sample_dirs]
    workers = worker_count(len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bench_worker, tasks))
    else:
        results = [_bench_worker(t) for t in tasks]
    results.sort(key=lambda r: r["id"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_log.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


def run_eval(run_dir, gt_dir, out_dir=None) -> metrics.EvalReport:
    report = metrics.evaluate_benchmark(run_dir, gt_dir)
    metrics.write_report(report, out_dir if out_dir is not None else run_dir)
    return report


# ---------------------------------------------------------------------------
# Small single-artifact commands


def run_lift(cfg: EditConfig) -> dict:
    out_dir = Path(cfg.paths["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cam, depth, _, _, _ = load_inputs(cfg)
    grid = geometry.lift(depth, cam)
    write_channel_pfms(np.moveaxis(grid.points, 2, 0), out_dir, "points")
    write_resolved(cfg, out_dir / "config.resolved.json")
    return {"output_dir": str(out_dir)}


def run_flow(cfg: EditConfig) -> dict:
    out_dir = Path(cfg.paths["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cam, depth, _, mask, _ = load_inputs(cfg)
    edit, spec = resolve_transform(cfg, depth, cam, mask)
    fl, _ = flowmod.build_flow(depth, cam, edit, mask,
                               footprint_2x2=cfg.flags["splat_footprint"],
                               validity_erosion=cfg.flags["validity_erosion"])
    write_pfm(ScalarField(fl.du), out_dir / "flow.u.pfm")
    write_pfm(ScalarField(fl.dv), out_dir / "flow.v.pfm")
    write_mask_png(fl.valid, out_dir / "flow_valid.png")
    write_resolved(cfg, out_dir / "config.resolved.json")
    return {"output_dir": str(out_dir), "transform": spec}


def load_flow(flow_dir) -> flowmod.FlowField:
    flow_dir = Path(flow_dir)
    du = read_pfm(flow_dir / "flow.u.pfm")
    dv = read_pfm(flow_dir / "flow.v.pfm")
    valid = read_mask_png(flow_dir / "flow_valid.png")
    return flowmod.FlowField(du.data, dv.data, valid)


def run_warp(cfg: EditConfig, flow_dir, signal_path) -> dict:
    out_dir = Path(cfg.paths["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    fl = load_flow(flow_dir)
    signal_path = Path(signal_path)
    if signal_path.suffix == ".pfm":
        signal = FeatureMap(read_pfm(signal_path).data[None])
    else:
        signal = read_image_png(signal_path)
    warped = flowmod.warp(signal, fl)
    if warped.channels in (1, 3):
        write_image_png(FeatureMap(np.clip(warped.data, 0.0, 1.0)),
                        out_dir / "warped.png")
    write_channel_pfms(warped.data, out_dir, "warped")
    return {"output_dir": str(out_dir)}


def run_edit_depth(cfg: EditConfig) -> dict:
    out_dir = Path(cfg.paths["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cam, depth, _, mask, provided_bg = load_inputs(cfg)
    edit, spec = resolve_transform(cfg, depth, cam, mask)
    result = depth_edit_mod.edit_depth(
        depth, cam, edit, mask, provided_bg,
        convention=cfg.flags["depth_convention"],
        footprint_2x2=cfg.flags["splat_footprint"],
        validity_erosion=cfg.flags["validity_erosion"],
    )
    write_pfm(result.edited_depth, out_dir / "d_prime.pfm")
    write_pfm(result.object_depth, out_dir / "d_prime_o.pfm")
    write_mask_png(result.warped_object_mask, out_dir / "m_prime_o.png")
    write_mask_png(result.background_mask, out_dir / "m_prime_b.png")
    write_mask_png(result.valid_mask, out_dir / "m_v.png")
    write_resolved(cfg, out_dir / "config.resolved.json")
    return {"output_dir": str(out_dir), "transform": spec}
