"""Mesh and landmark file I/O.

* OBJ is the input format for meshes with UVs: `v` lines, `vt` lines, faces
  as `f v/vt v/vt v/vt` (triangles only). The loader enforces a bijection
  between vertex index and UV index.
* PLY (binary little-endian) is the output format; an optional per-vertex
  `quality` float carries error maps.
* Landmark files: 6 lines of `x y z`, or 6 lines of `vertex_index`.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import FaceMesh, TemplateMesh


class MeshFormatError(ValueError):
    pass


def load_obj(path: str | Path) -> FaceMesh:
    """Read an OBJ with optional UVs; triangles only.

    When `vt` entries are present, every face vertex must be written as
    `v/vt` and the v->vt correspondence must be one-to-one; UVs are
    re-indexed to vertex order.
    """
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    face_v: list[list[int]] = []
    face_vt: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: malformed vertex line")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif tag == "vt":
                if len(parts) < 3:
                    raise MeshFormatError(f"{path}:{lineno}: malformed vt line")
                uvs.append([float(parts[1]), float(parts[2])])
            elif tag == "f":
                corners = parts[1:]
                if len(corners) != 3:
                    raise MeshFormatError(f"{path}:{lineno}: only triangle faces are supported")
                vi, ti = [], []
                for c in corners:
                    fields = c.split("/")
                    vi.append(int(fields[0]) - 1)
                    if len(fields) > 1 and fields[1]:
                        ti.append(int(fields[1]) - 1)
                face_v.append(vi)
                if ti:
                    if len(ti) != 3:
                        raise MeshFormatError(f"{path}:{lineno}: mixed v and v/vt corners")
                    face_vt.append(ti)
    if not verts:
        raise MeshFormatError(f"{path}: no vertices")
    vertices = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(face_v, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise MeshFormatError(f"{path}: face vertex index out of range")

    uv = None
    if uvs:
        if len(face_vt) != len(face_v):
            raise MeshFormatError(f"{path}: UVs present but not every face corner has a vt index")
        ft = np.asarray(face_vt, dtype=np.int64)
        if ft.min() < 0 or ft.max() >= len(uvs):
            raise MeshFormatError(f"{path}: face vt index out of range")
        v_to_t = np.full(len(vertices), -1, dtype=np.int64)
        for vi, ti in zip(faces.ravel(), ft.ravel()):
            if v_to_t[vi] == -1:
                v_to_t[vi] = ti
            elif v_to_t[vi] != ti:
                raise MeshFormatError(
                    f"{path}: vertex {vi} maps to several UV indices ({v_to_t[vi]}, {ti})"
                )
        used = v_to_t[v_to_t >= 0]
        if len(np.unique(used)) != len(used):
            raise MeshFormatError(f"{path}: several vertices share one UV index")
        uv_arr = np.asarray(uvs, dtype=np.float64)
        uv = np.zeros((len(vertices), 2))
        covered = v_to_t >= 0
        uv[covered] = uv_arr[v_to_t[covered]]
        if not covered.all():
            # vertices never referenced by a face have no UV; they are also
            # isolated, which the template builder rejects downstream
            uv[~covered] = np.nan
    return FaceMesh(vertices=vertices, faces=faces, uv=uv)


def save_obj(path: str | Path, mesh: FaceMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        if mesh.uv is not None:
            for t in mesh.uv:
                fh.write(f"vt {t[0]!r} {t[1]!r}\n")
            for f in mesh.faces:
                fh.write(
                    f"f {f[0]+1}/{f[0]+1} {f[1]+1}/{f[1]+1} {f[2]+1}/{f[2]+1}\n"
                )
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")


def load_template_obj(path: str | Path) -> tuple[TemplateMesh, np.ndarray]:
    """Load an OBJ as a template; returns (TemplateMesh, reference vertices)."""
    m = load_obj(path)
    if m.uv is None:
        raise MeshFormatError(f"{path}: template mesh must carry per-vertex UVs")
    return TemplateMesh.build(m.uv, m.faces), m.vertices


def save_ply(path: str | Path, mesh: FaceMesh, quality: np.ndarray | None = None) -> None:
    """Binary little-endian PLY; optional per-vertex float `quality`."""
    n, f = len(mesh.vertices), len(mesh.faces)
    if quality is not None:
        quality = np.asarray(quality, dtype=np.float32).reshape(n)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += ["property float x", "property float y", "property float z"]
    if quality is not None:
        header.append("property float quality")
    header += [f"element face {f}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        verts = mesh.vertices.astype("<f4")
        if quality is not None:
            verts = np.column_stack([verts, quality.astype("<f4")])
        fh.write(verts.tobytes())
        for tri in mesh.faces:
            fh.write(struct.pack("<Biii", 3, int(tri[0]), int(tri[1]), int(tri[2])))


def load_ply(path: str | Path) -> tuple[FaceMesh, np.ndarray | None]:
    """Read a PLY written by :func:`save_ply` (binary LE, float32 vertices)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header[1]:
        raise MeshFormatError(f"{path}: only binary little-endian PLY is supported")
    n_vert = n_face = 0
    vert_props: list[str] = []
    element = None
    for line in header[2:]:
        parts = line.split()
        if parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vert = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            if parts[1] != "float":
                raise MeshFormatError(f"{path}: unsupported vertex property type {parts[1]}")
            vert_props.append(parts[2])
    stride = 4 * len(vert_props)
    need = n_vert * stride
    raw = np.frombuffer(body[:need], dtype="<f4").reshape(n_vert, len(vert_props))
    cols = {name: raw[:, k] for k, name in enumerate(vert_props)}
    vertices = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    quality = cols["quality"].astype(np.float64) if "quality" in cols else None
    faces = np.empty((n_face, 3), dtype=np.int64)
    off = need
    for k in range(n_face):
        cnt = body[off]
        if cnt != 3:
            raise MeshFormatError(f"{path}: non-triangle face in PLY")
        faces[k] = struct.unpack_from("<iii", body, off + 1)
        off += 1 + 12
    return FaceMesh(vertices=vertices, faces=faces), quality


def load_mesh(path: str | Path) -> FaceMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path)[0]
    return load_obj(path)


def load_landmarks(path: str | Path, mesh: FaceMesh | None = None) -> np.ndarray:
    """6 landmark positions, from `x y z` lines or vertex-index lines."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            rows.append(line.split())
    if len(rows) != 6:
        raise MeshFormatError(f"{path}: expected exactly 6 landmarks, got {len(rows)}")
    widths = {len(r) for r in rows}
    if widths == {1}:
        if mesh is None:
            raise MeshFormatError(f"{path}: index landmarks need a mesh to resolve against")
        idx = np.asarray([int(r[0]) for r in rows], dtype=np.int64)
        if idx.min() < 0 or idx.max() >= len(mesh.vertices):
            raise MeshFormatError(f"{path}: landmark vertex index out of range")
        pts = mesh.vertices[idx]
    elif widths == {3}:
        pts = np.asarray([[float(x) for x in r] for r in rows], dtype=np.float64)
    else:
        raise MeshFormatError(f"{path}: lines must be all `x y z` or all `vertex_index`")
    centered = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-12) < 2:
        raise MeshFormatError(f"{path}: landmarks are collinear")
    return pts


def save_landmarks(path: str | Path, indices: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in np.asarray(indices).reshape(-1):
            fh.write(f"{int(i)}\n")
