"""Subcommand CLI orchestrating the pipeline.

Subcommands: synth, align, correct, init, fuse, eval, run. Exit codes are
stable for scripting: 0 success, 1 usage error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import affine as affine_mod
from .config import PipelineConfig, apply_values, format_config, parse_config_text
from .coordnet import NumericFailure
from .dense import (
    build_dense_cloud,
    compute_cycle_errors,
    filter_reliable,
    scene_diagonal,
    select_neighbors,
    voxel_downsample,
)
from .field import (
    CorrectionField,
    build_training_set,
    correct_depth_maps,
    finetune_view,
    save_field,
    train_global,
)
from .fusion import TsdfVolume, evaluate_geometry, extract_mesh, tsdf_integrate
from .report import write_report
from .scene_io import (
    DepthMap,
    FormatError,
    SparseModel,
    TriangleMesh,
    parse_colmap_model,
    read_pfm,
    read_ply_mesh,
    read_ply_points,
    resize_depth_bilinear,
    write_pfm,
    write_ply_mesh,
    write_ply_points,
)
from .synth import (
    CorruptionSpec,
    SceneSpec,
    corrupt_depths,
    depth_error_report,
    generate_scene,
    write_scene_directory,
)

logger = logging.getLogger(__name__)

_DEFAULTS = PipelineConfig()


class UsageError(Exception):
    """Bad invocation: unknown flags, invalid argument values."""


class DataError(Exception):
    """Missing or malformed input data."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Scene loading


@dataclass(eq=False)
class LoadedScene:
    model: SparseModel
    vggt: list[DepthMap]
    mono: list[DepthMap]
    gt_depths: list[DepthMap] | None
    gt_samples: np.ndarray | None


def _read_depth_file(path: Path) -> DepthMap:
    try:
        return read_pfm(path.read_bytes())
    except FileNotFoundError:
        raise DataError(f"scene incomplete: missing {path}") from None
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_scene(scene_dir) -> LoadedScene:
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise DataError(f"scene directory {scene_dir} does not exist")
    try:
        model = parse_colmap_model(scene_dir)
    except FormatError as exc:
        raise DataError(str(exc)) from exc

    vggt, mono = [], []
    for view in model.views:
        stem = Path(view.name).stem
        dv = _read_depth_file(scene_dir / "depth" / f"{stem}_vggt.pfm")
        dm = _read_depth_file(scene_dir / "depth" / f"{stem}_mono.pfm")
        vggt.append(resize_depth_bilinear(dv, view.width, view.height))
        mono.append(resize_depth_bilinear(dm, view.width, view.height))

    gt_depths = None
    gt_paths = [scene_dir / "gt" / f"{Path(v.name).stem}.pfm" for v in model.views]
    if all(p.exists() for p in gt_paths):
        gt_depths = [
            resize_depth_bilinear(_read_depth_file(p), v.width, v.height)
            for p, v in zip(gt_paths, model.views)
        ]
    gt_samples = None
    samples_path = scene_dir / "gt" / "surface_samples.ply"
    if samples_path.exists():
        gt_samples, _ = read_ply_points(samples_path.read_bytes())
    return LoadedScene(model=model, vggt=vggt, mono=mono,
                       gt_depths=gt_depths, gt_samples=gt_samples)


# ---------------------------------------------------------------------------
# Pipeline stages shared by subcommands


def align_scene(scene: LoadedScene):
    """Per-view OLS alignment of both channels; returns maps, fits, triplets."""
    aligned_v, aligned_m = [], []
    params = {}
    triplets_by_view = {}
    for view, dv, dm in zip(scene.model.views, scene.vggt, scene.mono):
        triplets = affine_mod.extract_triplets(view, scene.model, dv, dm)
        fit_v = affine_mod.fit_affine([(t.d_vggt, t.d_anchor) for t in triplets])
        fit_m = affine_mod.fit_affine([(t.d_mono, t.d_anchor) for t in triplets])
        aligned_v.append(affine_mod.apply_affine(dv, fit_v))
        aligned_m.append(affine_mod.apply_affine(dm, fit_m))
        params[view.view_id] = (fit_v, fit_m)
        aligned = []
        for t in triplets:
            av = fit_v.s * t.d_vggt + fit_v.b
            am = fit_m.s * t.d_mono + fit_m.b
            if av > 0 and am > 0:
                aligned.append(
                    affine_mod.AnchorTriplet(t.x, t.y, av, am, t.d_anchor)
                )
        triplets_by_view[view.view_id] = aligned
    return aligned_v, aligned_m, params, triplets_by_view


def select_head(head: str, corr_v: DepthMap, corr_m: DepthMap) -> DepthMap:
    if head == "vggt":
        return corr_v
    if head == "mono":
        return corr_m
    both = corr_v.mask & corr_m.mask
    vals = np.where(both, 0.5 * (corr_v.values + corr_m.values), 0.0)
    return DepthMap(vals)


def _auto_voxel(config: PipelineConfig, model: SparseModel) -> tuple[float, float]:
    diag = scene_diagonal(model)
    down = config.downsample_voxel if config.downsample_voxel > 0 else 0.004 * diag
    tsdf = config.tsdf_voxel if config.tsdf_voxel > 0 else 0.004 * diag
    return down, tsdf


def _write_depth_dir(directory: Path, views, maps_v, maps_m) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for view, dv, dm in zip(views, maps_v, maps_m):
        stem = Path(view.name).stem
        (directory / f"{stem}_vggt.pfm").write_bytes(write_pfm(dv))
        (directory / f"{stem}_mono.pfm").write_bytes(write_pfm(dm))


def _load_corrected(out_dir: Path, views) -> tuple[list[DepthMap], list[DepthMap]]:
    corrected = out_dir / "depth_corrected"
    if not corrected.is_dir():
        raise DataError(
            f"{corrected} not found: run the 'correct' (or 'run') subcommand first"
        )
    maps_v, maps_m = [], []
    for view in views:
        stem = Path(view.name).stem
        maps_v.append(_read_depth_file(corrected / f"{stem}_vggt.pfm"))
        maps_m.append(_read_depth_file(corrected / f"{stem}_mono.pfm"))
    return maps_v, maps_m


# ---------------------------------------------------------------------------
# Subcommands


_SYNTH_CORRUPTION_KEYS = {
    "offset_frac_vggt", "offset_frac_mono", "poly_frac_vggt", "poly_frac_mono",
    "noise_sigma_frac_vggt", "noise_sigma_frac_mono",
    "outlier_fraction", "outlier_magnitude",
}


def _build_synth_specs(values: dict[str, str]) -> tuple[SceneSpec, CorruptionSpec]:
    scene_keys = {f.name for f in fields(SceneSpec)}
    scene_kwargs, corr_kwargs = {}, {}
    scale = {}
    for key, raw in values.items():
        if key in scene_keys:
            kind = SceneSpec.__dataclass_fields__[key].type
            scene_kwargs[key] = (
                int(raw) if kind in ("int", int)
                else float(raw) if kind in ("float", float)
                else raw
            )
        elif key in _SYNTH_CORRUPTION_KEYS:
            corr_kwargs[key] = float(raw)
        elif key == "corruption_seed":
            corr_kwargs["seed"] = int(raw)
        elif key in ("scale_min_vggt", "scale_max_vggt", "scale_min_mono", "scale_max_mono"):
            scale[key] = float(raw)
        else:
            raise DataError(f"unknown scene-spec key {key!r}")
    if scale:
        base = CorruptionSpec()
        corr_kwargs["scale_range_vggt"] = (
            scale.get("scale_min_vggt", base.scale_range_vggt[0]),
            scale.get("scale_max_vggt", base.scale_range_vggt[1]),
        )
        corr_kwargs["scale_range_mono"] = (
            scale.get("scale_min_mono", base.scale_range_mono[0]),
            scale.get("scale_max_mono", base.scale_range_mono[1]),
        )
    return SceneSpec(**scene_kwargs), CorruptionSpec(**corr_kwargs)


def cmd_synth(args) -> int:
    values = {}
    if args.spec:
        path = Path(args.spec)
        if not path.exists():
            raise DataError(f"spec file {path} not found")
        values = parse_config_text(path.read_text())
    if args.seed is not None:
        values["seed"] = str(args.seed)
        values.setdefault("corruption_seed", str(args.seed))
    try:
        scene_spec, corruption_spec = _build_synth_specs(values)
        scene = generate_scene(scene_spec)
        corrupted = corrupt_depths(scene, corruption_spec)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    write_scene_directory(scene, corrupted, args.out)
    logger.info("scene written to %s (%d views, %d anchor points)",
                args.out, len(scene.views), len(scene.model.points))
    return 0


def cmd_align(args) -> int:
    scene = load_scene(args.scene)
    aligned_v, aligned_m, params, _ = align_scene(scene)
    out = Path(args.out)
    _write_depth_dir(out / "depth_aligned", scene.model.views, aligned_v, aligned_m)
    lines = ["# view head scale offset"]
    for view_id in sorted(params):
        fit_v, fit_m = params[view_id]
        lines.append(f"{view_id} vggt {fit_v.s!r} {fit_v.b!r}")
        lines.append(f"{view_id} mono {fit_m.s!r} {fit_m.b!r}")
    (out / "affine_params.txt").write_text("\n".join(lines) + "\n")
    logger.info("aligned depth maps written to %s", out / "depth_aligned")
    return 0


def _train_and_correct(scene: LoadedScene, config: PipelineConfig, out: Path,
                       timings: list) -> tuple:
    """align + two-stage training + dense correction, with timing rows."""
    t0 = time.perf_counter()
    aligned_v, aligned_m, _, triplets_by_view = align_scene(scene)
    timings.append(("per_view_alignment", time.perf_counter() - t0))

    train_cfg = config.train_config()
    samples = build_training_set(triplets_by_view, scene.model.views)
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(len(scene.model.views) + 1)

    t0 = time.perf_counter()
    global_weights, history = train_global(
        samples, train_cfg, rng=np.random.default_rng(seeds[0])
    )
    timings.append(("global_training", time.perf_counter() - t0))

    t0 = time.perf_counter()
    per_view = {}
    for view in scene.model.views:
        per_view[view.view_id] = finetune_view(
            global_weights, samples.for_view(view.view_id), train_cfg,
            rng=np.random.default_rng(seeds[view.view_id + 1]),
            label=f"view {view.view_id}",
        )
    timings.append(("per_view_finetune", time.perf_counter() - t0))

    field = CorrectionField(
        global_weights=global_weights, per_view_weights=per_view,
        encoder=CorrectionField.identity(1).encoder,
        depth_scale=samples.depth_scale, num_views=len(scene.model.views),
    )
    field_dir = out / "field"
    field_dir.mkdir(parents=True, exist_ok=True)
    (field_dir / "field.ckpt").write_bytes(save_field(field))

    t0 = time.perf_counter()
    corr_v, corr_m = [], []
    for view, av, am in zip(scene.model.views, aligned_v, aligned_m):
        cv, cm = correct_depth_maps(field, view, av, am)
        corr_v.append(cv)
        corr_m.append(cm)
    timings.append(("per_pixel_correction", time.perf_counter() - t0))
    _write_depth_dir(out / "depth_corrected", scene.model.views, corr_v, corr_m)
    return aligned_v, aligned_m, corr_v, corr_m, field, history


def cmd_correct(args) -> int:
    config = _config_from_args(args)
    scene = load_scene(args.scene)
    out = Path(args.out)
    timings: list = []
    _train_and_correct(scene, config, out, timings)
    logger.info("corrected depth maps written to %s", out / "depth_corrected")
    return 0


def _dense_init(scene: LoadedScene, config: PipelineConfig,
                maps: list[DepthMap]):
    neighbors = select_neighbors(scene.model.views, config.neighbors)
    cloud = build_dense_cloud(scene.model.views, maps)
    cloud = compute_cycle_errors(cloud, scene.model.views, maps, neighbors)
    filtered = filter_reliable(cloud, config.threshold_px)
    down_voxel, _ = _auto_voxel(config, scene.model)
    downsampled = voxel_downsample(filtered, down_voxel)
    return cloud, filtered, downsampled


def _write_error_maps(out: Path, scene: LoadedScene, cloud) -> None:
    from .dense import cycle_error_maps

    error_dir = out / "cloud" / "error_maps"
    error_dir.mkdir(parents=True, exist_ok=True)
    for view, raster in zip(scene.model.views, cycle_error_maps(cloud, scene.model.views)):
        (error_dir / f"{Path(view.name).stem}.pfm").write_bytes(write_pfm(raster))


def cmd_init(args) -> int:
    config = _config_from_args(args)
    scene = load_scene(args.scene)
    out = Path(args.out)
    maps_v, maps_m = _load_corrected(out, scene.model.views)
    head_maps = [select_head(config.head, v, m) for v, m in zip(maps_v, maps_m)]
    cloud, filtered, downsampled = _dense_init(scene, config, head_maps)
    cloud_dir = out / "cloud"
    cloud_dir.mkdir(parents=True, exist_ok=True)
    (cloud_dir / "dense_filtered.ply").write_bytes(
        write_ply_points(downsampled.positions)
    )
    if getattr(args, "export_error_maps", False):
        _write_error_maps(out, scene, cloud)
    logger.info(
        "%d points -> %d reliable -> %d after downsampling",
        len(cloud), len(filtered), len(downsampled),
    )
    return 0


def _fuse(scene: LoadedScene, config: PipelineConfig, head_maps, bounds_points):
    _, tsdf_voxel = _auto_voxel(config, scene.model)
    truncation = config.tsdf_truncation_voxels * tsdf_voxel
    volume = TsdfVolume.around_points(bounds_points, tsdf_voxel, truncation)
    for view, depth in zip(scene.model.views, head_maps):
        tsdf_integrate(volume, view, depth)
    return extract_mesh(volume)


def cmd_fuse(args) -> int:
    config = _config_from_args(args)
    scene = load_scene(args.scene)
    out = Path(args.out)
    maps_v, maps_m = _load_corrected(out, scene.model.views)
    head_maps = [select_head(config.head, v, m) for v, m in zip(maps_v, maps_m)]
    pts = np.array([p.position for p in scene.model.points])
    mesh = _fuse(scene, config, head_maps, pts)
    mesh_dir = out / "mesh"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    (mesh_dir / "fused.ply").write_bytes(write_ply_mesh(mesh))
    logger.info("mesh with %d vertices, %d faces", len(mesh.vertices), len(mesh.faces))
    return 0


def cmd_eval(args) -> int:
    if args.tau <= 0:
        raise UsageError("--tau must be positive")
    pred_path = Path(args.pred)
    gt_path = Path(args.gt)
    for p in (pred_path, gt_path):
        if not p.exists():
            raise DataError(f"{p} not found")
    data = pred_path.read_bytes()
    try:
        pred_points = read_ply_mesh(data).vertices
    except FormatError:
        try:
            pred_points, _ = read_ply_points(data)
        except FormatError as exc:
            raise DataError(f"{pred_path}: {exc}") from exc
    try:
        gt_points, _ = read_ply_points(gt_path.read_bytes())
    except FormatError as exc:
        raise DataError(f"{gt_path}: {exc}") from exc
    if len(pred_points) == 0 or len(gt_points) == 0:
        raise DataError("cannot evaluate empty point sets")
    result = evaluate_geometry(pred_points, gt_points, args.tau)
    write_report(args.out, {"eval": result.as_dict()})
    print(f"chamfer = {result.chamfer:.9g}")
    print(f"precision = {result.precision:.6f}")
    print(f"recall = {result.recall:.6f}")
    print(f"f1 = {result.f1:.6f}")
    return 0


def cmd_run(args) -> int:
    config = _config_from_args(args)
    scene_dir = Path(args.scene)
    out = Path(args.out)
    timings: list = []

    t0 = time.perf_counter()
    scene = load_scene(scene_dir)
    timings.append(("load_scene", time.perf_counter() - t0))

    aligned_v, aligned_m, corr_v, corr_m, field, history = _train_and_correct(
        scene, config, out, timings
    )

    head_pick = {"vggt": scene.vggt, "mono": scene.mono}.get(config.head, scene.vggt)
    head_corr = [select_head(config.head, v, m) for v, m in zip(corr_v, corr_m)]

    t0 = time.perf_counter()
    cloud, filtered, downsampled = _dense_init(scene, config, head_corr)
    cloud_dir = out / "cloud"
    cloud_dir.mkdir(parents=True, exist_ok=True)
    (cloud_dir / "dense_filtered.ply").write_bytes(
        write_ply_points(downsampled.positions)
    )
    if getattr(args, "export_error_maps", False):
        _write_error_maps(out, scene, cloud)
    timings.append(("dense_cloud_filtering", time.perf_counter() - t0))

    t0 = time.perf_counter()
    if len(filtered):
        mesh = _fuse(scene, config, head_corr, filtered.positions)
    else:
        logger.warning("no reliable points; skipping fusion")
        mesh = TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    mesh_dir = out / "mesh"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    (mesh_dir / "fused.ply").write_bytes(write_ply_mesh(mesh))
    timings.append(("tsdf_fusion_marching_cubes", time.perf_counter() - t0))

    t0 = time.perf_counter()
    summary: dict = {
        "scene": str(scene_dir),
        "head": config.head,
        "views": len(scene.model.views),
        "anchor_points": len(scene.model.points),
        "cloud_points_raw": len(cloud),
        "cloud_points_reliable": len(filtered),
        "cloud_points_downsampled": len(downsampled),
        "mesh_vertices": len(mesh.vertices),
        "mesh_faces": len(mesh.faces),
    }
    per_view_errors = None
    if scene.gt_depths is not None:
        aligned_head = [select_head(config.head, v, m) for v, m in zip(aligned_v, aligned_m)]
        stats_input = depth_error_report(head_pick, scene.gt_depths)
        stats_aligned = depth_error_report(aligned_head, scene.gt_depths)
        stats_corrected = depth_error_report(head_corr, scene.gt_depths)
        summary["depth_l1"] = {
            "input": stats_input.mean_l1,
            "affine_aligned": stats_aligned.mean_l1,
            "corrected": stats_corrected.mean_l1,
        }
        per_view_errors = {
            "input": list(stats_input.per_view_mean),
            "affine_aligned": list(stats_aligned.per_view_mean),
            "corrected": list(stats_corrected.per_view_mean),
        }
    if scene.gt_samples is not None and len(mesh.vertices):
        down_voxel, _ = _auto_voxel(config, scene.model)
        tau = config.tau if config.tau > 0 else down_voxel
        result = evaluate_geometry(mesh.vertices, scene.gt_samples, tau)
        summary["eval"] = result.as_dict()
    timings.append(("evaluation", time.perf_counter() - t0))

    report_dir = out / "report"
    write_report(
        report_dir,
        summary,
        timings=timings,
        loss_history=history,
        per_view_errors=per_view_errors,
        cycle_errors=cloud.mean_cycle_error,
        threshold_px=config.threshold_px,
    )
    (report_dir / "config_used.txt").write_text(format_config(config))
    for name, secs in timings:
        print(f"{name}: {secs:.2f} s")
    if "eval" in summary:
        print(f"chamfer = {summary['eval']['chamfer']:.9g}")
        print(f"f1 = {summary['eval']['f1']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


_CONFIG_FLAGS = [
    ("global_steps", int, "global training steps"),
    ("global_t0", int, "global-stage warm-restart period"),
    ("global_lr", float, "global-stage peak learning rate"),
    ("view_steps", int, "per-view fine-tune steps"),
    ("view_t0", int, "per-view warm-restart period"),
    ("view_lr", float, "per-view peak learning rate"),
    ("batch_size", int, "training batch size (drawn with replacement)"),
    ("weight_decay", float, "AdamW decoupled weight decay"),
    ("neighbors", int, "neighbor views per view for the cycle check"),
    ("threshold_px", float, "reliability threshold on mean cycle error"),
    ("downsample_voxel", float, "cloud downsample voxel (0 = 0.004 x scene diagonal)"),
    ("tsdf_voxel", float, "TSDF voxel size (0 = 0.004 x scene diagonal)"),
    ("tsdf_truncation_voxels", float, "TSDF truncation in voxels"),
    ("head", str, "depth head for cloud and fusion: vggt | mono | average"),
    ("tau", float, "F-score distance threshold (0 = downsample voxel)"),
    ("seed", int, "seed for all pipeline randomness"),
    ("threads", int, "worker-thread cap"),
]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file (flags override it)")
    for name, kind, help_text in _CONFIG_FLAGS:
        default = getattr(_DEFAULTS, name)
        parser.add_argument(
            f"--{name.replace('_', '-')}", dest=name, type=kind, default=None,
            help=f"{help_text} (default: {default})",
        )


def _config_from_args(args) -> PipelineConfig:
    config = PipelineConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} not found")
        try:
            config = apply_values(PipelineConfig, config, parse_config_text(path.read_text()))
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
    overrides = {
        name: str(getattr(args, name))
        for name, _, _ in _CONFIG_FLAGS
        if getattr(args, name, None) is not None
    }
    try:
        return apply_values(PipelineConfig, config, overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="depthfield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic scene directory")
    p_synth.add_argument("--spec", help="scene spec file (key = value)")
    p_synth.add_argument("--out", required=True, help="output scene directory")
    p_synth.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p_synth.set_defaults(func=cmd_synth)

    for name, func, help_text in [
        ("align", cmd_align, "per-view affine alignment only"),
        ("correct", cmd_correct, "alignment + correction-field training"),
        ("init", cmd_init, "filtered dense cloud from corrected depths"),
        ("fuse", cmd_fuse, "TSDF fusion + mesh extraction from corrected depths"),
        ("run", cmd_run, "full pipeline: align, train, correct, init, fuse, eval"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--scene", required=True, help="scene directory")
        p.add_argument("--out", required=True, help="output directory")
        _add_config_flags(p)
        if name in ("init", "run"):
            p.add_argument(
                "--export-error-maps", action="store_true",
                help="write per-view mean-cycle-error PFMs under cloud/error_maps/",
            )
        p.set_defaults(func=func)

    p_eval = sub.add_parser("eval", help="Chamfer and F-score between two PLY files")
    p_eval.add_argument("--pred", required=True, help="predicted mesh or cloud (PLY)")
    p_eval.add_argument("--gt", required=True, help="reference samples (PLY)")
    p_eval.add_argument("--tau", type=float, required=True, help="F-score threshold")
    p_eval.add_argument("--out", required=True, help="report output directory")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
