"""Synthetic scenes with fully known ground truth.

Stands in for the upstream point-map / UV-image networks. The head proxy is
a spherical cap (a face patch cut from an icosphere, optionally deformed by
smooth radial bumps); cameras sit on a frontal arc so that, as with real
face captures, most template vertices are seen in every view and the
per-view visibility percentile cuts only the weakest matches.

Per view, triangles are rasterized with a depth buffer and
perspective-correct barycentric interpolation: every covered pixel stores
the 3D surface point and the interpolated template UV at its center
(non-covered pixels hold NaN). A vertex's nearest UV match therefore sits
within half a pixel's UV footprint of its true projection, while vertices
missing from a view (occluded or back-facing) are separated by a whole
UV edge length, which is what the distance thresholding needs.

Noise models: track sigma jitters each vertex's projection before
rasterization (correspondence error), point-map and UV sigmas add per-pixel
Gaussians, camera sigma perturbs the poses reported to the pipeline.
All randomness comes from per-purpose substreams of one seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import (
    CameraIntrinsics,
    CameraPose,
    axis_angle_from_rotation,
    project_points,
    rotation_from_axis_angle,
)
from .correspondence import TrackSet
from .mesh import FaceMesh, TemplateMesh, make_icosphere, make_icosphere_cap, vertex_normals
from .views import ViewPrediction


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    subdivisions: int = 5            # icosphere refinement before the cap cut
    cap_angle_deg: float = 60.0      # face-patch half angle; 180 keeps the sphere closed
    template_obj: str | None = None  # overrides the icosphere when set
    n_views: int = 16
    image_size: int = 518
    ring_radius: float = 5.0
    arc_deg: float = 45.0            # cameras span azimuth +/- arc about +x; 180 = ring
    elevation_jitter: float = 0.25   # radians, uniform in +/- jitter
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    focal: float = 1000.0
    track_sigma_px: float = 0.0
    point_map_sigma: float = 0.0     # world units
    uv_sigma: float = 0.0
    camera_sigma_deg: float = 0.0
    occlusion_fraction: float = 0.0  # vertices forced below 2 visible views
    bump_amplitude: float = 0.0      # radial deformation of the ground truth
    n_bumps: int = 0
    seed: int = 0
    first_camera_frame: bool = True  # express everything in camera-0 coordinates

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("n_views must be >= 2")
        for name in ("track_sigma_px", "point_map_sigma", "uv_sigma", "camera_sigma_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.occlusion_fraction < 1.0):
            raise ValueError("occlusion_fraction must be in [0, 1)")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    template: TemplateMesh
    gt_mesh: FaceMesh
    gt_intrinsics: list[CameraIntrinsics]
    gt_poses: list[CameraPose]
    views: list[ViewPrediction]
    gt_tracks: TrackSet
    landmark_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed] + list(stream))


def _look_at_pose(center: np.ndarray, target: np.ndarray) -> CameraPose:
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
        x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraPose(rvec=axis_angle_from_rotation(R), t=-R @ center)


def _arc_poses(spec: SceneSpec, rng: np.random.Generator) -> list[CameraPose]:
    target = np.asarray(spec.look_at, dtype=np.float64)
    poses = []
    for i in range(spec.n_views):
        if spec.arc_deg >= 180.0:
            azimuth = 2.0 * np.pi * i / spec.n_views  # closed ring
        else:
            arc = np.deg2rad(spec.arc_deg)
            frac = i / (spec.n_views - 1) if spec.n_views > 1 else 0.5
            azimuth = -arc + 2.0 * arc * frac
        elev = spec.elevation_jitter * rng.uniform(-1.0, 1.0)
        center = target + spec.ring_radius * np.array(
            [np.cos(elev) * np.cos(azimuth), np.cos(elev) * np.sin(azimuth), np.sin(elev)]
        )
        poses.append(_look_at_pose(center, target))
    return poses


def _deform(vertices: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    v = vertices.copy()
    if spec.n_bumps == 0 or spec.bump_amplitude == 0.0:
        return v
    dirs = rng.normal(size=(spec.n_bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    widths = rng.uniform(0.3, 0.8, spec.n_bumps)
    amps = rng.uniform(-1.0, 1.0, spec.n_bumps) * spec.bump_amplitude
    radial = v / np.linalg.norm(v, axis=1, keepdims=True)
    scale = np.ones(len(v))
    for d, w, a in zip(dirs, widths, amps):
        ang = np.arccos(np.clip(radial @ d, -1.0, 1.0))
        scale += a * np.exp(-((ang / w) ** 2))
    return v * scale[:, None]


def _to_first_camera_frame(
    vertices: np.ndarray, poses: list[CameraPose]
) -> tuple[np.ndarray, list[CameraPose]]:
    R1, t1 = poses[0].rotation, poses[0].t
    new_vertices = vertices @ R1.T + t1
    new_poses = []
    for p in poses:
        Ri, ti = p.rotation, p.t
        Rn = Ri @ R1.T
        new_poses.append(CameraPose(rvec=axis_angle_from_rotation(Rn), t=ti - Rn @ t1))
    return new_vertices, new_poses


def pick_landmarks(vertices: np.ndarray) -> np.ndarray:
    """Six well-spread vertex indices (axis extremes), deduplicated."""
    idx = []
    for axis in range(3):
        idx += [int(np.argmin(vertices[:, axis])), int(np.argmax(vertices[:, axis]))]
    seen, out = set(), []
    for j in idx:
        if j not in seen:
            seen.add(j)
            out.append(j)
    k = 0
    while len(out) < 6:
        if k not in seen:
            out.append(k)
            seen.add(k)
        k += 1
    return np.asarray(out[:6], dtype=np.int64)


def perturb_cameras(
    poses: list[CameraPose],
    sigma_deg: float,
    seed_or_rng: int | np.random.Generator,
    skip_first: bool = False,
) -> list[CameraPose]:
    """Random initial-estimate error: each rotation composed with an axis-angle
    of half-normal magnitude |N(0, sigma)|; translation jittered proportionally
    to its own norm.

    skip_first leaves the first camera exact; predictions expressed in the
    first camera's own frame have no room for error there.
    """
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    sigma = np.deg2rad(sigma_deg)
    out = []
    for i, p in enumerate(poses):
        if skip_first and i == 0:
            out.append(p.copy())
            continue
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = abs(rng.normal(0.0, sigma))
        dR = rotation_from_axis_angle(axis * angle)
        Rn = dR @ p.rotation
        t_scale = np.linalg.norm(p.t) * sigma / np.sqrt(3.0)
        tn = p.t + rng.normal(0.0, 1.0, 3) * t_scale
        out.append(CameraPose(rvec=axis_angle_from_rotation(Rn), t=tn))
    return out


def _rasterize_view(
    h: int,
    w: int,
    px: np.ndarray,       # (N, 2) jittered projections, (u=col, v=row)
    z: np.ndarray,        # (N,) camera depths
    world: np.ndarray,    # (N, 3)
    uv: np.ndarray,       # (N, 2)
    faces: np.ndarray,    # (F, 3) already culled
) -> tuple[np.ndarray, np.ndarray]:
    """Depth-buffered triangle fill with perspective-correct interpolation."""
    zbuf = np.full((h, w), np.inf)
    point_map = np.full((h, w, 3), np.nan)
    uv_image = np.full((h, w, 2), np.nan)
    inv_z = 1.0 / z
    world_over_z = world * inv_z[:, None]
    uv_over_z = uv * inv_z[:, None]
    for tri in faces:
        p0, p1, p2 = px[tri[0]], px[tri[1]], px[tri[2]]
        x_lo = max(int(np.ceil(min(p0[0], p1[0], p2[0]))), 0)
        x_hi = min(int(np.floor(max(p0[0], p1[0], p2[0]))), w - 1)
        y_lo = max(int(np.ceil(min(p0[1], p1[1], p2[1]))), 0)
        y_hi = min(int(np.floor(max(p0[1], p1[1], p2[1]))), h - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        denom = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if abs(denom) < 1e-12:
            continue
        xs = np.arange(x_lo, x_hi + 1)
        ys = np.arange(y_lo, y_hi + 1)
        gx, gy = np.meshgrid(xs, ys)
        l1 = ((gx - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (gy - p0[1])) / denom
        l2 = ((p1[0] - p0[0]) * (gy - p0[1]) - (gx - p0[0]) * (p1[1] - p0[1])) / denom
        l0 = 1.0 - l1 - l2
        inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
        if not inside.any():
            continue
        iz = l0 * inv_z[tri[0]] + l1 * inv_z[tri[1]] + l2 * inv_z[tri[2]]
        depth = 1.0 / iz
        rows = gy[inside]
        cols = gx[inside]
        d = depth[inside]
        closer = d < zbuf[rows, cols]
        if not closer.any():
            continue
        rows, cols, d = rows[closer], cols[closer], d[closer]
        li = (l0[inside][closer], l1[inside][closer], l2[inside][closer])
        pm = sum(li[k][:, None] * world_over_z[tri[k]] for k in range(3)) * d[:, None]
        uvp = sum(li[k][:, None] * uv_over_z[tri[k]] for k in range(3)) * d[:, None]
        zbuf[rows, cols] = d
        point_map[rows, cols] = pm
        uv_image[rows, cols] = uvp
    return point_map, uv_image


def generate(spec: SceneSpec) -> SyntheticScene:
    """Build the scene; deterministic under spec.seed.

    Ground-truth tracks record, per (view, vertex), the pixel containing the
    jittered projection; their visibility is the rasterization truth
    (front-facing, in frame, not occluded), independent of the UV-distance
    test the pipeline applies later.
    """
    if spec.template_obj is not None:
        from .meshio import load_template_obj

        template, base_vertices = load_template_obj(spec.template_obj)
        base = FaceMesh(vertices=base_vertices, faces=template.faces, uv=template.uv)
    else:
        if spec.cap_angle_deg >= 180.0:
            base = make_icosphere(spec.subdivisions)
        else:
            base = make_icosphere_cap(spec.subdivisions, spec.cap_angle_deg)
        template = TemplateMesh.build(base.uv, base.faces)
    gt_vertices = _deform(base.vertices, spec, _rng(spec.seed, 1))

    n = len(gt_vertices)
    v_count = spec.n_views
    h = w = spec.image_size
    intr = CameraIntrinsics(
        fx=spec.focal, fy=spec.focal, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0
    )

    poses = None
    for attempt in range(5):
        cand = _arc_poses(spec, _rng(spec.seed, 2, attempt))
        verts = gt_vertices
        if spec.first_camera_frame:
            verts, cand = _to_first_camera_frame(gt_vertices, cand)
        mesh = FaceMesh(vertices=verts, faces=base.faces, uv=base.uv)
        normals = vertex_normals(mesh)
        ok = True
        per_view = []
        for pose in cand:
            px, z = project_points(intr, pose, verts)
            center = -pose.rotation.T @ pose.t
            facing = ((center - verts) * normals).sum(axis=1) > 0.0
            inb = (
                (z > 0.0)
                & (px[:, 0] > -0.5) & (px[:, 0] < w - 0.5)
                & (px[:, 1] > -0.5) & (px[:, 1] < h - 0.5)
            )
            vis = facing & inb
            per_view.append((px, z, vis))
            if not vis.any():
                ok = False
        if ok:
            poses = cand
            gt_vertices = verts
            gt_mesh = mesh
            break
    if poses is None:
        raise SceneGenerationError("a camera saw zero vertices in 5 placement attempts")

    # occlusion plan: chosen vertices keep at most one view
    allowed = np.ones((v_count, n), dtype=bool)
    if spec.occlusion_fraction > 0.0:
        occ_rng = _rng(spec.seed, 4)
        n_occ = int(np.ceil(spec.occlusion_fraction * n))
        occluded = occ_rng.choice(n, size=n_occ, replace=False)
        keep = occ_rng.integers(0, v_count, size=n_occ)
        allowed[:, occluded] = False
        allowed[keep, occluded] = True

    tracks = np.zeros((v_count, n, 2))
    vis_all = np.zeros((v_count, n), dtype=bool)
    dist_all = np.full((v_count, n), np.inf)
    views = []
    for i, pose in enumerate(poses):
        view_rng = _rng(spec.seed, 3, i)
        px, z, facing_vis = per_view[i]
        if spec.track_sigma_px > 0:
            px = px + view_rng.normal(0.0, spec.track_sigma_px, size=(n, 2))
        usable = facing_vis & allowed[i]
        face_ok = usable[base.faces].all(axis=1) & (z[base.faces] > 0.0).all(axis=1)
        point_map, uv_image = _rasterize_view(
            h, w, px, z, gt_vertices, template.uv, base.faces[face_ok]
        )
        covered = np.isfinite(uv_image).all(axis=2)
        if spec.point_map_sigma > 0:
            point_map[covered] += view_rng.normal(
                0.0, spec.point_map_sigma, size=(int(covered.sum()), 3)
            )
        if spec.uv_sigma > 0:
            uv_image[covered] = np.clip(
                uv_image[covered]
                + view_rng.normal(0.0, spec.uv_sigma, size=(int(covered.sum()), 2)),
                0.0,
                1.0,
            )

        splat = np.rint(px)
        inb = (
            (splat[:, 0] >= 0) & (splat[:, 0] <= w - 1)
            & (splat[:, 1] >= 0) & (splat[:, 1] <= h - 1)
        )
        vis = usable & inb
        tracks[i, :, 0] = np.clip(splat[:, 0], 0, w - 1)
        tracks[i, :, 1] = np.clip(splat[:, 1], 0, h - 1)
        vis_all[i] = vis
        dist_all[i, vis] = 0.0
        views.append(
            ViewPrediction(
                point_map=point_map, uv_image=uv_image, intrinsics=intr, pose=pose.copy()
            )
        )

    if spec.camera_sigma_deg > 0:
        noisy = perturb_cameras(
            poses, spec.camera_sigma_deg, _rng(spec.seed, 5),
            skip_first=spec.first_camera_frame,
        )
        for view, p in zip(views, noisy):
            view.pose = p

    gt_tracks = TrackSet(
        tracks=tracks,
        visibility=vis_all,
        nearest_distance=dist_all,
        epsilons=np.full(v_count, np.nan),
    )
    return SyntheticScene(
        spec=spec,
        template=template,
        gt_mesh=gt_mesh,
        gt_intrinsics=[intr] * v_count,
        gt_poses=[p.copy() for p in poses],
        views=views,
        gt_tracks=gt_tracks,
        landmark_indices=pick_landmarks(gt_vertices),
    )


def pixel_bound(scene: SyntheticScene, pixels: float) -> float:
    """World-space error of a `pixels`-sized track offset, back-projected at
    the largest visible depth and the smallest focal length."""
    zmax = 0.0
    for pose, vis in zip(scene.gt_poses, scene.gt_tracks.visibility):
        if vis.any():
            z = pose.transform(scene.gt_mesh.vertices[vis])[:, 2]
            zmax = max(zmax, float(z.max()))
    fmin = min(min(k.fx, k.fy) for k in scene.gt_intrinsics)
    return pixels * np.sqrt(2.0) * zmax / fmin


def halfpixel_bound(scene: SyntheticScene) -> float:
    """Half-pixel back-projection bound at scene depth."""
    return pixel_bound(scene, 0.5)


def write_scene(scene: SyntheticScene, outdir: str | Path) -> Path:
    """Write the on-disk layout the reconstruction CLI reads.

    outdir/manifest.json + per-view grid files + template.obj, plus ground
    truth under outdir/gt/ (mesh, cameras, landmark vertex indices).
    """
    import json

    from .gridio import write_grid
    from .manifest import save_manifest
    from .meshio import save_landmarks, save_obj

    outdir = Path(outdir)
    (outdir / "gt").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, view in enumerate(scene.views):
        pm_name, uv_name = f"point_map_{i:03d}.tgrd", f"uv_image_{i:03d}.tgrd"
        write_grid(outdir / pm_name, view.point_map.astype(np.float32))
        write_grid(outdir / uv_name, view.uv_image.astype(np.float32))
        entries.append(
            {
                "point_map": pm_name,
                "uv_image": uv_name,
                "intrinsics": view.intrinsics,
                "rotation": view.pose.rotation,
                "translation": view.pose.t,
            }
        )
    # the template OBJ's role is topology + UVs; its vertex positions are the
    # ground-truth proxy only for convenience and are never read back
    template_mesh = FaceMesh(
        vertices=scene.gt_mesh.vertices, faces=scene.template.faces, uv=scene.template.uv
    )
    save_obj(outdir / "template.obj", template_mesh)
    save_obj(outdir / "gt" / "mesh.obj", scene.gt_mesh)
    save_landmarks(outdir / "gt" / "landmarks.txt", scene.landmark_indices)
    cams = {
        "intrinsics": [list(map(float, k.as_array())) for k in scene.gt_intrinsics],
        "rotations": [p.rotation.tolist() for p in scene.gt_poses],
        "translations": [p.t.tolist() for p in scene.gt_poses],
    }
    with open(outdir / "gt" / "cameras.json", "w", encoding="utf-8") as fh:
        json.dump(cams, fh, indent=1)
    save_manifest(
        outdir / "manifest.json",
        entries,
        template="template.obj",
        landmarks="gt/landmarks.txt",
    )
    return outdir / "manifest.json"
