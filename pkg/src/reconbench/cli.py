"""Batch command-line driver: phantom, fuse, register, evaluate, ablate.

Configuration comes from a single YAML tree (--config); every exposed flag
overrides its config counterpart. Expected failures map to documented exit
codes without stack traces:

    2  invalid configuration        4  no surface in the fused volume
    3  I/O failure                  5  registration failure
                                    6  evaluation failure
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import io as rio
from . import pipeline as pl
from .fusion import NoSurface, NoValidObservations
from .geometry import CameraIntrinsics
from .mesh import EmptyMesh
from .metrics import EmptyInput
from .phantom import (
    ClearanceViolation,
    DepthNoise,
    InvalidSpec,
    NoiseSpec,
    PhantomSpec,
    PoseNoise,
    TrajectorySpec,
)
from .raycast import StrideTooLarge, set_threads
from .registration import (
    ConsensusTooSmall,
    DegenerateGeometry,
    DegenerateTrajectory,
    NoCorrespondences,
    TooFewCorrespondences,
)

logger = logging.getLogger("reconbench")

EXIT_BAD_CONFIG = 2
EXIT_IO = 3
EXIT_NO_SURFACE = 4
EXIT_REGISTRATION = 5
EXIT_EVALUATION = 6

_CONFIG_ERRORS = (InvalidSpec, StrideTooLarge, ValueError, KeyError, TypeError)
_REGISTRATION_ERRORS = (
    ConsensusTooSmall, NoCorrespondences, DegenerateTrajectory,
    DegenerateGeometry, TooFewCorrespondences,
)


@dataclass
class AblationConfig:
    cases: list[str] = field(default_factory=lambda: list(pl.ABLATION_CASES))
    frame_offset_enabled: bool = True

    def __post_init__(self):
        for case in self.cases:
            if case not in pl.ABLATION_CASES:
                raise InvalidSpec(
                    f"unknown ablation case {case!r}; valid: {', '.join(pl.ABLATION_CASES)}")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    dataset: str | None = None
    threads: int = 0  # 0 = default worker count
    log_level: str = "info"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(
            fx=200.0, fy=200.0, cx=159.5, cy=119.5, width=320, height=240))
    fusion: pl.FusionConfig = field(default_factory=pl.FusionConfig)
    registration: pl.RegistrationConfig = field(
        default_factory=lambda: pl.RegistrationConfig(
            frame_offset=pl.FrameOffsetConfig(enabled=False)))
    metrics: pl.MetricsConfig = field(default_factory=pl.MetricsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


def _build_dataclass(cls, data, path="config"):
    """Recursively construct nested dataclasses, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise InvalidSpec(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise InvalidSpec(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        target = _NESTED.get((cls, name))
        if target is not None:
            kwargs[name] = _build_dataclass(target, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "phantom"): PhantomSpec,
    (RunConfig, "trajectory"): TrajectorySpec,
    (RunConfig, "noise"): NoiseSpec,
    (NoiseSpec, "pose"): PoseNoise,
    (NoiseSpec, "depth"): DepthNoise,
    (RunConfig, "intrinsics"): CameraIntrinsics,
    (RunConfig, "fusion"): pl.FusionConfig,
    (RunConfig, "registration"): pl.RegistrationConfig,
    (pl.RegistrationConfig, "frame_offset"): pl.FrameOffsetConfig,
    (RunConfig, "metrics"): pl.MetricsConfig,
    (RunConfig, "ablation"): AblationConfig,
}


def load_config(path: str | None) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
    return _build_dataclass(RunConfig, data)


def config_to_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(asdict(cfg), sort_keys=True)


def _write_run_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.yaml").write_text(config_to_yaml(cfg), newline="\n")


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.noise = dataclasses.replace(cfg.noise, seed=args.seed)
        cfg.phantom = dataclasses.replace(cfg.phantom, seed=args.seed)
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "dataset", None) is not None:
        cfg.dataset = args.dataset
    if args.threads is not None:
        cfg.threads = args.threads
    if args.log_level is not None:
        cfg.log_level = args.log_level
    if getattr(args, "voxel_size", None) is not None:
        cfg.fusion = dataclasses.replace(cfg.fusion, voxel_size=args.voxel_size)
    if getattr(args, "weight_mode", None) is not None:
        cfg.fusion = dataclasses.replace(cfg.fusion, weight_mode=args.weight_mode)
    if getattr(args, "cases", None):
        cfg.ablation = AblationConfig(
            cases=args.cases, frame_offset_enabled=cfg.ablation.frame_offset_enabled)
    if getattr(args, "icp_rematch", False):
        cfg.registration = dataclasses.replace(cfg.registration, rematch=True)
    return cfg


def _setup(cfg: RunConfig) -> None:
    logging.basicConfig(
        level=getattr(logging, cfg.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if cfg.threads > 0:
        set_threads(cfg.threads)


def _require_dataset(cfg: RunConfig) -> rio.PhantomDataset:
    if cfg.dataset is None:
        raise InvalidSpec("dataset: path is required for this command")
    return rio.load_dataset(cfg.dataset)


# --- commands ----------------------------------------------------------------

def cmd_phantom(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _write_run_config(cfg, out)
    dataset = pl.generate_dataset(out, cfg.phantom, cfg.trajectory, cfg.noise, cfg.intrinsics)
    logger.info("wrote dataset with %d frames to %s", len(dataset.frame_ids), out)
    print(str(out))
    return 0


def cmd_fuse(cfg: RunConfig, depth_variant: str, pose_variant: str) -> int:
    dataset = _require_dataset(cfg)
    out = Path(cfg.out)
    _write_run_config(cfg, out)
    observations = dataset.observations(depth_variant, pose_variant)
    offset = pl.make_frame_offset(cfg.registration.frame_offset, cfg.seed)
    params = cfg.fusion.resolve(depth_variant == "noisy")
    logger.info("fusing %d observations (depth=%s poses=%s weight=%s)",
                len(observations), depth_variant, pose_variant, params.weight_mode)
    fusion_out = pl.fuse_observations(
        observations, cfg.fusion, offset, noisy_uncertainty=(depth_variant == "noisy"))
    rio.write_mesh_ply(out / "recon.ply", fusion_out.mesh)
    rio.write_trajectory(out / "trajectory_est.txt", dataset.frame_ids, fusion_out.est_poses)
    rio.write_volume(out / "volume.tsdf", fusion_out.volume)
    touched = int((fusion_out.volume.weight > 0).sum())
    (out / "fusion_log.txt").write_text(
        f"observations_used: {len(observations)}\n"
        f"depth_variant: {depth_variant}\n"
        f"pose_variant: {pose_variant}\n"
        f"weight_mode: {params.weight_mode}\n"
        f"truncation_mode: {params.truncation_mode}\n"
        f"voxels_touched: {touched}\n"
        f"volume_dims: {'x'.join(map(str, fusion_out.volume.dims))}\n",
        newline="\n",
    )
    logger.info("wrote recon.ply (%d vertices) and volume stats", fusion_out.mesh.n_vertices)
    return 0


def cmd_register(cfg: RunConfig, recon_path: str | None) -> int:
    dataset = _require_dataset(cfg)
    out = Path(cfg.out)
    _write_run_config(cfg, out)
    recon_file = Path(recon_path) if recon_path else out / "recon.ply"
    traj_file = recon_file.parent / "trajectory_est.txt"
    if not recon_file.exists():
        raise FileNotFoundError(f"reconstruction mesh not found: {recon_file}")
    if not traj_file.exists():
        raise FileNotFoundError(f"estimated trajectory not found: {traj_file}")
    rec_mesh = rio.read_mesh_ply(recon_file)
    if rec_mesh.n_triangles == 0:
        raise EmptyMesh(f"{recon_file} has no triangles")
    _, est_poses = rio.read_trajectory(traj_file)

    fusion_out = pl.FusionOutput(
        volume=None, mesh=rec_mesh, est_poses=est_poses,
        frame_offset=None, observations=[])
    registration = pl.register_output(dataset, fusion_out, cfg.registration, cfg.seed)

    from .mesh import apply_transform
    from .registration import registered_camera

    mesh_reg = apply_transform(registration.composed, rec_mesh)
    poses_reg = [registered_camera(registration.composed, p) for p in est_poses]
    rio.write_mesh_ply(out / "registered.ply", mesh_reg)
    rio.write_trajectory(out / "trajectory_registered.txt", dataset.frame_ids, poses_reg)
    report = rio.registration_report_text(
        registration.composed.scale,
        registration.composed.matrix(),
        registration.refined.inlier_count,
        registration.refined.rms_residual,
        registration.refined.per_point_residuals,
    )
    initial = rio.registration_report_text(
        registration.initial.transform.scale,
        registration.initial.transform.matrix(),
        registration.initial.inlier_count,
        registration.initial.rms_residual,
        registration.initial.per_point_residuals,
    )
    (out / "registration_report.txt").write_text(
        "# composed (refined o initial)\n" + report
        + "\n# initial pose-based\n" + initial,
        newline="\n",
    )
    logger.info("registration scale %.6f, icp rms %.4f mm over %d pairs",
                registration.scale, registration.refined.rms_residual,
                len(registration.correspondences))
    return 0


def cmd_evaluate(cfg: RunConfig, registered_path: str | None) -> int:
    dataset = _require_dataset(cfg)
    out = Path(cfg.out)
    _write_run_config(cfg, out)
    reg_file = Path(registered_path) if registered_path else out / "registered.ply"
    traj_file = reg_file.parent / "trajectory_registered.txt"
    if not reg_file.exists():
        raise FileNotFoundError(f"registered mesh not found: {reg_file}")
    if not traj_file.exists():
        raise FileNotFoundError(f"registered trajectory not found: {traj_file}")
    mesh_reg = rio.read_mesh_ply(reg_file)
    _, poses_reg = rio.read_trajectory(traj_file)

    from .metrics import evaluation_report
    from .raycast import sample_grid_keypoints

    kps = sample_grid_keypoints(dataset.intrinsics, cfg.registration.keypoint_stride)
    report = evaluation_report(
        dataset.mesh_gt, mesh_reg, dataset.poses_gt, poses_reg,
        dataset.intrinsics, dataset.intrinsics,
        [kps] * len(poses_reg), frame_ids=dataset.frame_ids,
        discontinuity_threshold=cfg.registration.discontinuity_threshold,
        bin_width=cfg.metrics.histogram_bin,
        point_to_mesh_mode=cfg.metrics.point_to_mesh_mode,
    )
    _write_report_bundle(out, report)
    summary = json.dumps(report.summary(), sort_keys=True)
    (out / "summary.json").write_text(summary + "\n", newline="\n")
    print(summary)
    return 0


def _write_report_bundle(out: Path, report) -> None:
    rio.write_histogram_csv(out / "tre_histogram.csv", report.tre.hist_edges, report.tre.hist_counts)
    rio.write_histogram_csv(out / "p2m_histogram.csv", report.p2m.hist_edges, report.p2m.hist_counts)
    rio.write_ply(out / "tre_points.ply", report.tre_points.points,
                  scalars={"error": report.tre_points.errors})
    rio.write_ply(out / "p2m_points.ply", report.p2m_points.points,
                  scalars={"error": report.p2m_points.errors})
    lines = ["# metrics summary (mm)"]
    for name, stats in (("tre", report.tre), ("p2m", report.p2m)):
        lines.append(
            f"{name}: mean {rio.format_sig(stats.mean)} std {rio.format_sig(stats.std)} "
            f"median {rio.format_sig(stats.median)} p90 {rio.format_sig(stats.p90)} "
            f"p95 {rio.format_sig(stats.p95)} count {stats.count}"
        )
    lines.append(
        f"tre_per_frame: mean {rio.format_sig(report.tre_frame_mean)} "
        f"std {rio.format_sig(report.tre_frame_std)}"
    )
    if report.raw_depth_tre is not None:
        lines.append(
            f"raw_depth_tre: mean {rio.format_sig(report.raw_depth_tre.mean)} "
            f"std {rio.format_sig(report.raw_depth_tre.std)}"
        )
    (out / "metrics_summary.txt").write_text("\n".join(lines) + "\n", newline="\n")


def cmd_ablate(cfg: RunConfig) -> int:
    dataset = _require_dataset(cfg)
    out = Path(cfg.out)
    _write_run_config(cfg, out)
    reg_cfg = dataclasses.replace(
        cfg.registration,
        frame_offset=dataclasses.replace(
            cfg.registration.frame_offset, enabled=cfg.ablation.frame_offset_enabled),
    )
    results: dict[str, pl.CaseResult] = {}
    failures: dict[str, str] = {}
    for case in cfg.ablation.cases:
        try:
            res = pl.run_case(dataset, case, cfg.fusion, reg_cfg, cfg.metrics, cfg.seed)
            results[case] = res
            logger.info("case %-24s tre %.3f mm  p2m %.3f mm  (%.1fs)",
                        case, res.tre_mean, res.p2m_mean, res.seconds)
        except Exception as exc:  # per-case failures recorded, not fatal
            failures[case] = f"{type(exc).__name__}: {exc}"
            logger.error("case %s failed: %s", case, failures[case])
    rows = []
    for case in cfg.ablation.cases:
        if case in results:
            r = results[case]
            rows.append([case, r.tre_mean, r.tre_std, r.p2m_mean, r.p2m_std])
        else:
            rows.append([case, float("nan"), float("nan"), float("nan"), float("nan")])
    rio.write_csv(out / "ablation_results.csv",
                  ["case", "tre_mean", "tre_std", "p2m_mean", "p2m_std"], rows)
    checks = pl.ordering_checks(results)
    check_lines = [
        f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})" for name, ok, detail in checks
    ]
    for case, msg in failures.items():
        check_lines.append(f"ERROR {case}: {msg}")
    (out / "ordering_checks.txt").write_text("\n".join(check_lines) + "\n", newline="\n")
    for line in check_lines:
        print(line)
    if results:
        return 0
    logger.error("all ablation cases failed")
    return EXIT_EVALUATION


# --- argument parsing -------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reconbench",
        description="TSDF depth-fusion reconstruction, registration, and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", default=None, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--log-level", dest="log_level", default=None,
                       choices=["error", "warn", "warning", "info", "debug"])
        if dataset:
            p.add_argument("--dataset", default=None, help="phantom dataset directory")

    p = sub.add_parser("phantom", help="generate a synthetic ground-truth dataset")
    common(p, dataset=False)

    p = sub.add_parser("fuse", help="fuse depth maps into a TSDF and extract the surface")
    common(p)
    p.add_argument("--depth", choices=["clean", "noisy"], default="noisy")
    p.add_argument("--poses", choices=["gt", "noisy"], default="noisy")
    p.add_argument("--voxel-size", dest="voxel_size", type=float, default=None)
    p.add_argument("--weight-mode", dest="weight_mode", default=None,
                   choices=["constant_one", "inverse_uncertainty"])

    p = sub.add_parser("register", help="register a reconstruction to the reference")
    common(p)
    p.add_argument("--recon", default=None, help="reconstruction PLY (default <out>/recon.ply)")
    p.add_argument("--icp-rematch", dest="icp_rematch", action="store_true",
                   help="re-match ICP targets against the reference surface")

    p = sub.add_parser("evaluate", help="compute agreement metrics")
    common(p)
    p.add_argument("--registered", default=None,
                   help="registered mesh PLY (default <out>/registered.ply)")

    p = sub.add_parser("ablate", help="run the input-variant ablation matrix")
    common(p)
    p.add_argument("--cases", nargs="+", default=None, choices=list(pl.ABLATION_CASES))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = _apply_overrides(cfg, args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _CONFIG_ERRORS as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    _setup(cfg)
    try:
        if args.command == "phantom":
            return cmd_phantom(cfg)
        if args.command == "fuse":
            return cmd_fuse(cfg, args.depth, args.poses)
        if args.command == "register":
            return cmd_register(cfg, args.recon)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.registered)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NoSurface, NoValidObservations) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NO_SURFACE
    except _REGISTRATION_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_REGISTRATION
    except (EmptyInput, EmptyMesh) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    except (InvalidSpec, ClearanceViolation, StrideTooLarge) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
