"""Coarse triangle-mesh assets: loading, normalization, and rasterization.

The rasterizer is the reference renderer the field is distilled against.
Its color/opacity/normal conventions match the volume renderer exactly so
either source can feed the guidance condition.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import CameraPose, world_to_camera_matrix
from .errors import MeshLoadError
from .field import RenderOutput, encode_normal_map

DEFAULT_GRAY = 0.5
NORMALIZE_HALF_EXTENT = 0.9
_NEAR = 1e-3


@dataclass
class CoarseAsset:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int
    vertex_colors: np.ndarray  # (V, 3) in [0, 1]
    vertex_normals: np.ndarray  # (V, 3) unit

    def __post_init__(self):
        if len(self.triangles) < 1:
            raise MeshLoadError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshLoadError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshLoadError("mesh contains non-finite vertices")


def compute_vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted face normals accumulated per vertex."""
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    face = np.cross(v1 - v0, v2 - v0)  # length = 2 * area
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, triangles[:, k], face)
    lens = np.linalg.norm(normals, axis=1)
    ok = lens > 1e-12
    normals[ok] /= lens[ok, None]
    normals[~ok] = (0.0, 0.0, 1.0)
    return normals


def normalize_to_box(vertices: np.ndarray, half_extent: float = NORMALIZE_HALF_EXTENT) -> np.ndarray:
    """Center the AABB at the origin and scale uniformly into the box."""
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    center = (lo + hi) / 2.0
    radius = float(np.max(hi - lo)) / 2.0
    if radius <= 0:
        raise MeshLoadError("mesh is degenerate (zero extent)")
    return (vertices - center) * (half_extent / radius)


def load_mesh(path) -> CoarseAsset:
    """Load an OBJ or PLY mesh, normalized into the field's bounding box."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MeshLoadError(f"cannot read {path}: {exc}") from exc
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, tris, colors, normals = _parse_obj(raw.decode("utf-8", errors="replace"))
    elif suffix == ".ply":
        verts, tris, colors, normals = _parse_ply(raw)
    else:
        raise MeshLoadError(f"unsupported mesh format {suffix!r}")
    if len(tris) == 0:
        raise MeshLoadError(f"{path} contains no triangles")
    verts = np.asarray(verts, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int64)
    if not np.all(np.isfinite(verts)):
        raise MeshLoadError(f"{path} contains non-finite vertices")
    verts = normalize_to_box(verts)
    if colors is None:
        colors = np.full((len(verts), 3), DEFAULT_GRAY)
    else:
        colors = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)
    if normals is None:
        normals = compute_vertex_normals(verts, tris)
    else:
        normals = np.asarray(normals, dtype=np.float64)
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.maximum(lens, 1e-12)
    return CoarseAsset(verts, tris, colors, normals)


def _parse_obj(text: str):
    verts, colors, vnormals, faces, face_normals = [], [], [], [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            vals = [float(x) for x in parts[1:]]
            if len(vals) not in (3, 6):
                raise MeshLoadError(f"malformed vertex line: {line!r}")
            verts.append(vals[:3])
            colors.append(vals[3:6] if len(vals) == 6 else None)
        elif tag == "vn":
            vnormals.append([float(x) for x in parts[1:4]])
        elif tag == "f":
            idx, nidx = [], []
            for tok in parts[1:]:
                fields = tok.split("/")
                vi = int(fields[0])
                idx.append(vi - 1 if vi > 0 else len(verts) + vi)
                if len(fields) == 3 and fields[2]:
                    ni = int(fields[2])
                    nidx.append(ni - 1 if ni > 0 else len(vnormals) + ni)
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
                if len(nidx) == len(idx):
                    face_normals.append([nidx[0], nidx[k], nidx[k + 1]])
    if not verts:
        raise MeshLoadError("OBJ file has no vertices")
    has_colors = any(c is not None for c in colors)
    color_arr = (
        np.array([c if c is not None else [DEFAULT_GRAY] * 3 for c in colors])
        if has_colors
        else None
    )
    normal_arr = None
    if vnormals and len(face_normals) == len(faces):
        # re-index per-corner normals onto vertices (last write wins)
        normal_arr = np.zeros((len(verts), 3))
        vn = np.asarray(vnormals)
        for f, fn in zip(faces, face_normals):
            for vi, ni in zip(f, fn):
                normal_arr[vi] = vn[ni]
    return verts, faces, color_arr, normal_arr


def _parse_ply(raw: bytes):
    if not raw.startswith(b"ply"):
        raise MeshLoadError("not a PLY file")
    header_end = raw.find(b"end_header")
    if header_end < 0:
        raise MeshLoadError("PLY header is not terminated")
    header = raw[:header_end].decode("ascii", errors="replace").splitlines()
    body = raw[raw.index(b"\n", header_end) + 1 :]

    fmt = None
    elements = []  # (name, count, [(type, prop_name)...])
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshLoadError(f"unsupported PLY format {fmt!r}")

    verts, colors, normals, faces = [], [], [], []
    if fmt == "ascii":
        tokens = body.decode("ascii", errors="replace").split()
        pos = 0
        for name, count, props in elements:
            for _ in range(count):
                if props and props[0][0] == "list":
                    n = int(tokens[pos]); pos += 1
                    idx = [int(tokens[pos + k]) for k in range(n)]
                    pos += n
                    if name == "face":
                        for k in range(1, n - 1):
                            faces.append([idx[0], idx[k], idx[k + 1]])
                else:
                    row = {p[1]: float(tokens[pos + i]) for i, p in enumerate(props)}
                    pos += len(props)
                    if name == "vertex":
                        _ply_push_vertex(row, verts, colors, normals)
    else:
        sizes = {"char": "b", "uchar": "B", "int8": "b", "uint8": "B",
                 "short": "h", "ushort": "H", "int16": "h", "uint16": "H",
                 "int": "i", "uint": "I", "int32": "i", "uint32": "I",
                 "float": "f", "float32": "f", "double": "d", "float64": "d"}
        off = 0
        for name, count, props in elements:
            for _ in range(count):
                if props and props[0][0] == "list":
                    _, count_t, idx_t, _pname = props[0]
                    cfmt = "<" + sizes[count_t]
                    n = struct.unpack_from(cfmt, body, off)[0]
                    off += struct.calcsize(cfmt)
                    ifmt = "<" + sizes[idx_t] * n
                    idx = struct.unpack_from(ifmt, body, off)
                    off += struct.calcsize(ifmt)
                    if name == "face":
                        for k in range(1, n - 1):
                            faces.append([idx[0], idx[k], idx[k + 1]])
                else:
                    vfmt = "<" + "".join(sizes[p[0]] for p in props)
                    vals = struct.unpack_from(vfmt, body, off)
                    off += struct.calcsize(vfmt)
                    if name == "vertex":
                        row = {}
                        for (ptype, pname), val in zip(props, vals):
                            row[pname] = val / 255.0 if ptype in ("uchar", "uint8") and pname in ("red", "green", "blue") else val
                        _ply_push_vertex(row, verts, colors, normals)
    if not verts:
        raise MeshLoadError("PLY file has no vertices")
    color_arr = np.array(colors) if len(colors) == len(verts) else None
    normal_arr = np.array(normals) if len(normals) == len(verts) else None
    return verts, faces, color_arr, normal_arr


def _ply_push_vertex(row, verts, colors, normals):
    verts.append([row["x"], row["y"], row["z"]])
    if all(k in row for k in ("red", "green", "blue")):
        colors.append([row["red"], row["green"], row["blue"]])
    if all(k in row for k in ("nx", "ny", "nz")):
        normals.append([row["nx"], row["ny"], row["nz"]])


def rasterize(
    asset: CoarseAsset,
    pose: CameraPose,
    background: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> RenderOutput:
    """Depth-buffered, unshaded software rasterization.

    Coverage is binary; depth holds distance along the pixel ray (inf where
    uncovered); normals are interpolated vertex normals in camera space.
    """
    n = pose.image_size
    right, up, forward = pose.basis()
    rel = asset.vertices - pose.position
    xc = rel @ right
    yc = rel @ up
    zc = rel @ forward
    half = np.tan(np.deg2rad(pose.fov_deg) / 2.0)

    depth = np.full((n, n), np.inf)
    zview = np.full((n, n), np.inf)
    color = np.empty((n, n, 3))
    color[:] = background
    normal = np.zeros((n, n, 3))
    covered = np.zeros((n, n), dtype=bool)

    # Pixel (ix, iy) center in projected coordinates equals (ix, iy).
    with np.errstate(divide="ignore", invalid="ignore"):
        px = (xc / (zc * half) + 1.0) / 2.0 * n - 0.5
        py = (1.0 - yc / (zc * half)) / 2.0 * n - 0.5

    cam2w = world_to_camera_matrix(pose)
    for tri in asset.triangles:
        if np.any(zc[tri] <= _NEAR):
            continue  # behind or too close; near-plane clipping unsupported
        tx, ty, tz = px[tri], py[tri], zc[tri]
        x_lo = max(int(np.ceil(tx.min())), 0)
        x_hi = min(int(np.floor(tx.max())), n - 1)
        y_lo = max(int(np.ceil(ty.min())), 0)
        y_hi = min(int(np.floor(ty.max())), n - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        area = (tx[1] - tx[0]) * (ty[2] - ty[0]) - (ty[1] - ty[0]) * (tx[2] - tx[0])
        if area == 0.0:
            continue
        gx, gy = np.meshgrid(np.arange(x_lo, x_hi + 1), np.arange(y_lo, y_hi + 1))
        w0 = ((tx[1] - gx) * (ty[2] - gy) - (ty[1] - gy) * (tx[2] - gx)) / area
        w1 = ((tx[2] - gx) * (ty[0] - gy) - (ty[2] - gy) * (tx[0] - gx)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        # perspective-correct interpolation via 1/z
        inv_z = w0 / tz[0] + w1 / tz[1] + w2 / tz[2]
        z_pix = 1.0 / inv_z
        better = inside & (z_pix < zview[gy, gx])
        if not better.any():
            continue
        sy, sx = gy[better], gx[better]
        b0 = (w0[better] / tz[0]) * z_pix[better]
        b1 = (w1[better] / tz[1]) * z_pix[better]
        b2 = (w2[better] / tz[2]) * z_pix[better]
        zview[sy, sx] = z_pix[better]
        covered[sy, sx] = True
        vc = asset.vertex_colors[tri]
        color[sy, sx] = b0[:, None] * vc[0] + b1[:, None] * vc[1] + b2[:, None] * vc[2]
        vn = asset.vertex_normals[tri]
        nw = b0[:, None] * vn[0] + b1[:, None] * vn[1] + b2[:, None] * vn[2]
        nw = nw / np.maximum(np.linalg.norm(nw, axis=1, keepdims=True), 1e-12)
        normal[sy, sx] = nw @ cam2w.T

    # distance along the unit pixel ray = z_view / (ray . forward)
    ii = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    ndc_x, ndc_y = np.meshgrid(ii, -ii, indexing="xy")
    inv_cos = np.sqrt(1.0 + (ndc_x * half) ** 2 + (ndc_y * half) ** 2)
    depth[covered] = zview[covered] * inv_cos[covered]

    return RenderOutput(
        color=color,
        opacity=covered.astype(np.float64),
        depth=depth,
        normal=normal,
    )


def rasterize_normal_map(asset: CoarseAsset, pose: CameraPose) -> np.ndarray:
    out = rasterize(asset, pose)
    return encode_normal_map(out.normal, out.opacity)


def make_cube(face_colors: np.ndarray | None = None, half_extent: float = 0.9) -> CoarseAsset:
    """Axis-aligned cube with per-face constant colors (24 split vertices).

    Used by the tests and the demo assets; ``face_colors`` is (6, 3) ordered
    -x, +x, -y, +y, -z, +z. Defaults to mid-gray faces.
    """
    if face_colors is None:
        face_colors = np.full((6, 3), DEFAULT_GRAY)
    face_colors = np.asarray(face_colors, dtype=np.float64)
    axes = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)]
    verts, tris, colors, normals = [], [], [], []
    for f, (axis, sign) in enumerate(axes):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        base = len(verts)
        for du, dv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            p = np.zeros(3)
            p[axis] = sign
            p[u] = du
            p[v] = dv
            verts.append(p * half_extent)
            nrm = np.zeros(3)
            nrm[axis] = sign
            normals.append(nrm)
            colors.append(face_colors[f])
        if sign > 0:
            tris += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
        else:
            tris += [[base, base + 2, base + 1], [base, base + 3, base + 2]]
    return CoarseAsset(
        np.array(verts), np.array(tris, dtype=np.int64), np.array(colors), np.array(normals)
    )


def save_obj(asset: CoarseAsset, path) -> None:
    """Write OBJ with the vertex-color extension (v x y z r g b)."""
    lines = []
    for v, c in zip(asset.vertices, asset.vertex_colors):
        lines.append(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}")
    for nrm in asset.vertex_normals:
        lines.append(f"vn {nrm[0]:.8g} {nrm[1]:.8g} {nrm[2]:.8g}")
    for t in asset.triangles:
        lines.append(f"f {t[0]+1}//{t[0]+1} {t[1]+1}//{t[1]+1} {t[2]+1}//{t[2]+1}")
    Path(path).write_text("\n".join(lines) + "\n")
