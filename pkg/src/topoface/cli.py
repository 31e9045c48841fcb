"""Command-line surface.

Subcommands: synth (generate a synthetic scene directory), reconstruct
(tracks -> fusion -> TopBA -> mesh), eval (landmark alignment + chamfer),
fit-linear (linear-shape-model baseline), synth-model (random linear model
for the baseline).

Exit codes: 0 success, 2 usage, 3 I/O or file-format error, 4 solver
failure (including "no valid tracks" and fit divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cameras import rotation_from_axis_angle
from .correspondence import CorrespondenceConfig, build_tracks
from .evaluation import chamfer_stats, rigid_align
from .fusion import connect_mesh, fuse_initial
from .gridio import GridFormatError
from .manifest import ManifestError, load_manifest
from .mesh import FaceMesh, MeshTopologyError
from .meshio import MeshFormatError, load_landmarks, load_mesh, save_obj, save_ply
from .morphable import (
    FitConfig,
    FitDivergenceError,
    ModelRankError,
    fit,
    fitted_vertices,
    load_model,
    make_random_model,
    save_model,
)
from .synth import SceneGenerationError, SceneSpec, generate, write_scene
from .topba import NoValidTracksError, SolverConfig, build_system, initial_state, solve

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SOLVER = 4

_IO_ERRORS = (
    OSError,
    MeshFormatError,
    GridFormatError,
    ManifestError,
    MeshTopologyError,
    json.JSONDecodeError,
)


class SolverExitError(RuntimeError):
    pass


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("TOPOFACE_THREADS", "1")))
    except ValueError:
        return 1


def _add_reconstruct(sub):
    p = sub.add_parser("reconstruct", help="run the full pipeline on a scene manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("-o", "--outdir", type=Path, required=True)
    p.add_argument("--percentile", type=float, default=70.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--mode", choices=["alternating", "joint"], default="alternating")
    p.add_argument("--no-ba", action="store_true", help="stop after fusion (ablation)")
    p.add_argument("--no-laplacian", action="store_true", help="plain bundle adjustment (ablation)")
    p.add_argument("--free-intrinsics", action="store_true")
    p.add_argument("--huber", type=float, default=None, metavar="DELTA")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0, help="reserved; the pipeline is deterministic")
    return p


def cmd_reconstruct(args) -> int:
    threads = args.threads if args.threads is not None else _default_threads()
    scene = load_manifest(args.manifest)
    cconf = CorrespondenceConfig(percentile=args.percentile)
    tracks = build_tracks(scene.views, scene.template, cconf, threads=threads)
    cloud, tracks = fuse_initial(scene.views, tracks)

    args.outdir.mkdir(parents=True, exist_ok=True)
    report: dict = {
        "version": __version__,
        "n_views": len(scene.views),
        "n_vertices": scene.template.n_vertices,
        "track_counts_min": int(cloud.track_counts.min()),
        "tracked_vertices": int(cloud.constrained_mask.sum()),
        "percentile": args.percentile,
    }
    if args.no_ba:
        mesh = connect_mesh(cloud, scene.template)
        report["mode"] = "no_ba"
    else:
        config = SolverConfig(
            lam=0.0 if args.no_laplacian else args.lam,
            mode=args.mode,
            freeze_intrinsics=not args.free_intrinsics,
            huber_delta=args.huber,
        )
        system = build_system(scene.views, tracks, cloud, scene.template, config)
        state, solve_report = solve(system, initial_state(scene.views, cloud))
        if solve_report.termination == "solver_failure":
            raise SolverExitError("bundle adjustment failed (normal equations unsolvable)")
        cloud.points = state.points
        mesh = connect_mesh(cloud, scene.template)
        report["mode"] = "no_laplacian" if args.no_laplacian else args.mode
        report["solve"] = solve_report.to_dict()
        report["cameras"] = [
            {
                "rotation": rotation_from_axis_angle(state.rvecs[i]).tolist(),
                "translation": state.ts[i].tolist(),
                "intrinsics": state.intrinsics[i].tolist(),
            }
            for i in range(len(scene.views))
        ]
    save_obj(args.outdir / "mesh.obj", mesh)
    save_ply(args.outdir / "mesh.ply", mesh)
    with open(args.outdir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    print(f"wrote {args.outdir / 'mesh.ply'} and report.json")
    return EXIT_OK


def _add_synth(sub):
    d = SceneSpec()
    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("outdir", type=Path)
    p.add_argument("--subdivisions", type=int, default=d.subdivisions)
    p.add_argument("--cap-angle", type=float, default=d.cap_angle_deg,
                   help="face-patch half angle in degrees; 180 keeps the closed sphere")
    p.add_argument("--views", type=int, default=d.n_views)
    p.add_argument("--image-size", type=int, default=d.image_size)
    p.add_argument("--radius", type=float, default=d.ring_radius)
    p.add_argument("--arc", type=float, default=d.arc_deg, help="camera azimuth span, +/- degrees")
    p.add_argument("--elevation-jitter", type=float, default=d.elevation_jitter)
    p.add_argument("--focal", type=float, default=d.focal)
    p.add_argument("--track-sigma", type=float, default=0.0)
    p.add_argument("--point-map-sigma", type=float, default=0.0)
    p.add_argument("--uv-sigma", type=float, default=0.0)
    p.add_argument("--camera-sigma-deg", type=float, default=0.0)
    p.add_argument("--occlusion", type=float, default=0.0)
    p.add_argument("--bumps", type=int, default=0)
    p.add_argument("--bump-amplitude", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    return p


def cmd_synth(args) -> int:
    try:
        spec = SceneSpec(
            subdivisions=args.subdivisions,
            cap_angle_deg=args.cap_angle,
            n_views=args.views,
            image_size=args.image_size,
            ring_radius=args.radius,
            arc_deg=args.arc,
            elevation_jitter=args.elevation_jitter,
            focal=args.focal,
            track_sigma_px=args.track_sigma,
            point_map_sigma=args.point_map_sigma,
            uv_sigma=args.uv_sigma,
            camera_sigma_deg=args.camera_sigma_deg,
            occlusion_fraction=args.occlusion,
            n_bumps=args.bumps,
            bump_amplitude=args.bump_amplitude,
            seed=args.seed,
        )
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    scene = generate(spec)
    manifest = write_scene(scene, args.outdir)
    print(f"wrote {manifest}")
    return EXIT_OK


def _add_eval(sub):
    p = sub.add_parser("eval", help="align a reconstruction to a GT scan and report chamfer stats")
    p.add_argument("predicted", type=Path)
    p.add_argument("ground_truth", type=Path)
    p.add_argument("--landmarks-pred", type=Path, required=True)
    p.add_argument("--landmarks-gt", type=Path, default=None,
                   help="defaults to the predicted-side landmark file")
    p.add_argument("--with-scale", action="store_true", help="similarity instead of rigid alignment")
    p.add_argument("--symmetric", action="store_true")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--unit-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--error-map", type=Path, default=None, help="write a PLY with per-vertex quality")
    p.add_argument("-o", "--output", type=Path, default=None)
    return p


def cmd_eval(args) -> int:
    pred = load_mesh(args.predicted)
    gt = load_mesh(args.ground_truth)
    lm_pred = load_landmarks(args.landmarks_pred, mesh=pred)
    lm_gt = load_landmarks(args.landmarks_gt or args.landmarks_pred, mesh=gt)
    transform = rigid_align(lm_pred, lm_gt, with_scale=args.with_scale)
    aligned = FaceMesh(vertices=transform.apply(pred.vertices), faces=pred.faces)
    report = chamfer_stats(
        aligned, gt,
        samples=args.samples, seed=args.seed,
        symmetric=args.symmetric, unit_scale=args.unit_scale,
    )
    doc = report.to_dict()
    doc["alignment"] = {
        "rotation": transform.rotation.tolist(),
        "translation": transform.translation.tolist(),
        "scale": transform.scale,
    }
    text = json.dumps(doc, indent=1)
    if args.output:
        args.output.write_text(text + "\n", encoding="utf-8")
    print(text)
    if args.error_map:
        save_ply(args.error_map, aligned, quality=report.per_vertex)
    return EXIT_OK


def _add_fit_linear(sub):
    p = sub.add_parser("fit-linear", help="fit a linear shape model to the tracked samples")
    p.add_argument("manifest", type=Path)
    p.add_argument("model", type=Path)
    p.add_argument("-o", "--outdir", type=Path, required=True)
    p.add_argument("--percentile", type=float, default=70.0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--step-size", type=float, default=1e-2)
    p.add_argument("--threads", type=int, default=None)
    return p


def cmd_fit_linear(args) -> int:
    threads = args.threads if args.threads is not None else _default_threads()
    scene = load_manifest(args.manifest)
    model = load_model(args.model)
    if model.n_vertices != scene.template.n_vertices:
        raise ManifestError(
            f"model has {model.n_vertices} vertices, template has {scene.template.n_vertices}"
        )
    tracks = build_tracks(
        scene.views, scene.template, CorrespondenceConfig(percentile=args.percentile),
        threads=threads,
    )
    _, tracks = fuse_initial(scene.views, tracks)
    result = fit(model, scene.views, tracks, FitConfig(step_size=args.step_size, max_steps=args.steps))
    args.outdir.mkdir(parents=True, exist_ok=True)
    mesh = FaceMesh(
        vertices=fitted_vertices(model, result),
        faces=scene.template.faces,
        uv=scene.template.uv,
    )
    save_obj(args.outdir / "fitted.obj", mesh)
    save_ply(args.outdir / "fitted.ply", mesh)
    with open(args.outdir / "fit.json", "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=1)
    print(f"final loss {result.loss:.6g} after {result.n_steps} steps")
    return EXIT_OK


def _add_synth_model(sub):
    p = sub.add_parser("synth-model", help="random orthonormal linear model over a template OBJ")
    p.add_argument("template", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--coefficients", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    return p


def cmd_synth_model(args) -> int:
    from .meshio import load_template_obj

    template, vertices = load_template_obj(args.template)
    model = make_random_model(
        template.n_vertices, args.coefficients, seed=args.seed, mean=vertices
    )
    save_model(args.output, model)
    print(f"wrote {args.output} ({model.n_coefficients} coefficients)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topoface",
        description="Topologically consistent face meshes from point maps + UV images",
    )
    parser.add_argument("--version", action="version", version=f"topoface {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_reconstruct(sub)
    _add_eval(sub)
    _add_fit_linear(sub)
    _add_synth_model(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "reconstruct": cmd_reconstruct,
        "synth": cmd_synth,
        "eval": cmd_eval,
        "fit-linear": cmd_fit_linear,
        "synth-model": cmd_synth_model,
    }
    try:
        return handlers[args.command](args)
    except (NoValidTracksError, FitDivergenceError, SolverExitError, SceneGenerationError) as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except ModelRankError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except _IO_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
