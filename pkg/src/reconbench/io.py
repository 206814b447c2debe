"""File formats: DMAP/UMAP depth maps, PLY meshes and point clouds,
trajectory/intrinsics text records, TSDF volume dumps, CSV reports,
and the phantom dataset directory layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .fusion import DepthObservation, TsdfVolume
from .geometry import CameraIntrinsics, RigidTransform
from .mesh import TriangleMesh
from .raycast import DepthMap, UncertaintyMap

_DMAP_MAGIC = b"DMAP"
_VOL_MAGIC = b"TSDF"


# --- depth / uncertainty maps -------------------------------------------------

def write_dmap(path: str | Path, values: np.ndarray) -> None:
    """DMAP: magic, u8 version=1, u32 width, u32 height, f32 LE row-major."""
    values = np.ascontiguousarray(values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(_DMAP_MAGIC)
        f.write(struct.pack("<BII", 1, w, h))
        f.write(values.tobytes())


def read_dmap(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _DMAP_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, w, h = struct.unpack("<BII", f.read(9))
        if version != 1:
            raise ValueError(f"{path}: unsupported DMAP version {version}")
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(h, w).copy()


def depth_map_name(frame_id: int) -> str:
    return f"frame_{frame_id:06d}.dmap"


def uncertainty_map_name(frame_id: int) -> str:
    return f"frame_{frame_id:06d}.umap"


# --- PLY ----------------------------------------------------------------------

def write_ply(
    path: str | Path,
    vertices: np.ndarray,
    triangles: np.ndarray | None = None,
    colors: np.ndarray | None = None,
    scalars: dict[str, np.ndarray] | None = None,
    binary: bool = True,
) -> None:
    """Binary or ASCII PLY; float64 positions, optional uchar colors and
    named float64 per-vertex scalar properties (e.g. "error")."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    n = len(vertices)
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += [f"property double {ax}" for ax in "xyz"]
    if colors is not None:
        colors = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)
        ucolors = np.round(colors * 255).astype(np.uint8).reshape(-1, 3)
        header += [f"property uchar {ch}" for ch in ("red", "green", "blue")]
    scalars = scalars or {}
    for name in scalars:
        header.append(f"property double {name}")
    if triangles is not None:
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        header.append(f"element face {len(triangles)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if colors is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            fields += [(name, "<f8") for name in scalars]
            rec = np.empty(n, dtype=fields)
            rec["x"], rec["y"], rec["z"] = vertices.T
            if colors is not None:
                rec["red"], rec["green"], rec["blue"] = ucolors.T
            for name, arr in scalars.items():
                rec[name] = np.asarray(arr, dtype=np.float64)
            f.write(rec.tobytes())
            if triangles is not None:
                trec = np.empty(len(triangles), dtype=[("k", "u1"), ("i", "<i4", (3,))])
                trec["k"] = 3
                trec["i"] = triangles.astype("<i4")
                f.write(trec.tobytes())
        else:
            for i in range(n):
                row = [f"{float(v)!r}" for v in vertices[i]]
                if colors is not None:
                    row += [str(int(c)) for c in ucolors[i]]
                row += [f"{float(scalars[name][i])!r}" for name in scalars]
                f.write((" ".join(row) + "\n").encode("ascii"))
            if triangles is not None:
                for t in triangles:
                    f.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))


def write_mesh_ply(path: str | Path, mesh: TriangleMesh, binary: bool = True) -> None:
    write_ply(path, mesh.vertices, mesh.triangles, colors=mesh.colors, binary=binary)


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray | None, dict[str, np.ndarray]]:
    """Returns (vertices, triangles or None, extra per-vertex properties)."""
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        binary = None
        n_vertex = n_face = 0
        v_props: list[tuple[str, str]] = []
        element = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unterminated header")
            tokens = line.strip().decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                binary = tokens[1] == "binary_little_endian"
            elif tokens[0] == "element":
                element = tokens[1]
                if element == "vertex":
                    n_vertex = int(tokens[2])
                elif element == "face":
                    n_face = int(tokens[2])
            elif tokens[0] == "property" and element == "vertex":
                if tokens[1] == "list":
                    raise ValueError("list property on vertices unsupported")
                v_props.append((tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break

        typemap = {
            "double": "<f8", "float": "<f4", "float64": "<f8", "float32": "<f4",
            "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4",
        }
        dtype = [(name, typemap[t]) for name, t in v_props]
        if binary:
            rec = np.frombuffer(f.read(n_vertex * np.dtype(dtype).itemsize), dtype=dtype)
            tris = None
            if n_face:
                traw = np.frombuffer(
                    f.read(n_face * (1 + 12)), dtype=[("k", "u1"), ("i", "<i4", (3,))])
                tris = traw["i"].astype(np.int64)
        else:
            rows = [f.readline().split() for _ in range(n_vertex)]
            rec = {name: np.array([r[i] for r in rows], dtype=np.float64)
                   for i, (name, _) in enumerate(v_props)}
            tris = None
            if n_face:
                tris = np.array(
                    [f.readline().split()[1:4] for _ in range(n_face)], dtype=np.int64)
    vertices = np.stack([np.asarray(rec["x"], np.float64),
                         np.asarray(rec["y"], np.float64),
                         np.asarray(rec["z"], np.float64)], axis=1)
    extras = {
        name: np.asarray(rec[name], np.float64)
        for name, _ in v_props
        if name not in ("x", "y", "z")
    }
    return vertices, tris, extras


def read_mesh_ply(path: str | Path) -> TriangleMesh:
    vertices, triangles, extras = read_ply(path)
    if triangles is None:
        triangles = np.empty((0, 3), dtype=np.int64)
    colors = None
    if all(ch in extras for ch in ("red", "green", "blue")):
        colors = np.stack([extras["red"], extras["green"], extras["blue"]], axis=1) / 255.0
    return TriangleMesh(vertices, triangles, colors)


# --- trajectories / intrinsics ------------------------------------------------

def write_trajectory(path: str | Path, frame_ids, poses: list[RigidTransform]) -> None:
    """One line per frame: frame_id tx ty tz qw qx qy qz (camera-to-world)."""
    with open(path, "w", newline="\n") as f:
        f.write("# frame_id tx ty tz qw qx qy qz\n")
        for fid, pose in zip(frame_ids, poses):
            t = [float(v) for v in pose.translation]
            q = [float(v) for v in pose.to_quat()]
            f.write(
                f"{int(fid)} {t[0]!r} {t[1]!r} {t[2]!r} "
                f"{q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r}\n"
            )


def read_trajectory(path: str | Path) -> tuple[np.ndarray, list[RigidTransform]]:
    frame_ids = []
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}: expected 8 fields, got {len(parts)}")
            frame_ids.append(int(parts[0]))
            t = np.array(parts[1:4], dtype=np.float64)
            q = np.array(parts[4:8], dtype=np.float64)
            poses.append(RigidTransform.from_quat(t, q))
    return np.asarray(frame_ids, dtype=np.int64), poses


def write_intrinsics(path: str | Path, k: CameraIntrinsics) -> None:
    data = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height}
    Path(path).write_text(yaml.safe_dump(data, sort_keys=True), newline="\n")


def read_intrinsics(path: str | Path) -> CameraIntrinsics:
    data = yaml.safe_load(Path(path).read_text())
    return CameraIntrinsics(
        fx=float(data["fx"]), fy=float(data["fy"]),
        cx=float(data["cx"]), cy=float(data["cy"]),
        width=int(data["width"]), height=int(data["height"]),
    )


# --- TSDF volume dump (debug) ---------------------------------------------

def write_volume(path: str | Path, volume: TsdfVolume) -> None:
    with open(path, "wb") as f:
        f.write(_VOL_MAGIC)
        f.write(struct.pack("<B", 1))
        f.write(struct.pack("<3d", *volume.origin))
        f.write(struct.pack("<d", volume.voxel_size))
        f.write(struct.pack("<3I", *volume.dims))
        f.write(volume.tsdf.astype("<f4").tobytes())
        f.write(volume.weight.astype("<f4").tobytes())


def read_volume(path: str | Path) -> TsdfVolume:
    with open(path, "rb") as f:
        if f.read(4) != _VOL_MAGIC:
            raise ValueError(f"{path}: bad magic")
        (version,) = struct.unpack("<B", f.read(1))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        origin = struct.unpack("<3d", f.read(24))
        (voxel_size,) = struct.unpack("<d", f.read(8))
        dims = struct.unpack("<3I", f.read(12))
        n = int(np.prod(dims))
        tsdf = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
        weight = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
    vol = TsdfVolume(origin, voxel_size, dims)
    vol.tsdf[:] = tsdf
    vol.weight[:] = weight
    return vol


# --- CSV / reports ----------------------------------------------------------

def format_sig(x: float, digits: int = 4) -> str:
    """Fixed '.'-decimal representation with the given significant digits."""
    if not np.isfinite(x):
        return "nan"
    if x == 0:
        return "0.000"
    return f"{x:.{digits}g}"

def write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    """CSV with '.' decimals, 4 significant digits, LF line endings."""
    with open(path, "w", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            cells = [
                format_sig(c) if isinstance(c, float) else str(c) for c in row
            ]
            f.write(",".join(cells) + "\n")


def write_histogram_csv(path: str | Path, hist_edges: np.ndarray, hist_counts: np.ndarray) -> None:
    rows = [
        [float(hist_edges[i]), float(hist_edges[i + 1]), int(hist_counts[i])]
        for i in range(len(hist_counts))
    ]
    write_csv(path, ["bin_lo", "bin_hi", "count"], rows)


def registration_report_text(scale, transform_matrix, inlier_count, rms, residuals) -> str:
    """Structured text report: matrix, scale, inliers, rms, percentiles."""
    lines = ["# registration result", "matrix:"]
    for row in np.asarray(transform_matrix):
        lines.append("  " + " ".join(f"{v: .9e}" for v in row))
    lines.append(f"scale: {float(scale)!r}")
    lines.append(f"inlier_count: {int(inlier_count)}")
    lines.append(f"rms_residual_mm: {float(rms)!r}")
    residuals = np.asarray(residuals, dtype=np.float64)
    for p in (50, 75, 90, 95, 99):
        lines.append(f"residual_p{p}_mm: {float(np.percentile(residuals, p))!r}")
    return "\n".join(lines) + "\n"


# --- dataset directory layout --------------------------------------------

@dataclass
class PhantomDataset:
    """View of a dataset: directory-backed, or in-memory via ``mem_maps``."""

    root: Path
    mesh_gt: TriangleMesh
    intrinsics: CameraIntrinsics
    frame_ids: np.ndarray
    poses_gt: list[RigidTransform]
    poses_noisy: list[RigidTransform]
    manifest: dict
    mem_maps: dict | None = None  # {variant: [(depth, uncertainty), ...]}

    def _load_maps(self, depth_dir: str, unc_dir: str) -> list[tuple[DepthMap, UncertaintyMap | None]]:
        maps = []
        for fid in self.frame_ids:
            depth = DepthMap(read_dmap(self.root / depth_dir / depth_map_name(fid)))
            upath = self.root / unc_dir / uncertainty_map_name(fid)
            unc = UncertaintyMap(read_dmap(upath)) if upath.exists() else None
            maps.append((depth, unc))
        return maps

    def observations(self, depth: str = "clean", poses: str = "gt") -> list[DepthObservation]:
        """Per-frame observations; depth in {clean, noisy}, poses in {gt, noisy}."""
        pose_list = {"gt": self.poses_gt, "noisy": self.poses_noisy}[poses]
        if depth not in ("clean", "noisy"):
            raise ValueError(f"unknown depth variant {depth!r}")
        if self.mem_maps is not None:
            maps = self.mem_maps[depth]
        elif depth == "clean":
            maps = self._load_maps("depth", "uncertainty")
        else:
            maps = self._load_maps("depth_noisy", "uncertainty_noisy")
        return [
            DepthObservation(
                frame_id=int(fid), depth=d, intrinsics=self.intrinsics,
                cam_to_world=pose, uncertainty=u)
            for fid, pose, (d, u) in zip(self.frame_ids, pose_list, maps)
        ]


def write_dataset(
    root: str | Path,
    mesh_gt: TriangleMesh,
    intrinsics: CameraIntrinsics,
    frame_ids: np.ndarray,
    poses_gt: list[RigidTransform],
    poses_noisy: list[RigidTransform],
    observations_clean: list[DepthObservation],
    observations_noisy: list[DepthObservation],
    manifest: dict,
) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_mesh_ply(root / "mesh_gt.ply", mesh_gt)
    write_intrinsics(root / "intrinsics.yaml", intrinsics)
    write_trajectory(root / "trajectory_gt.txt", frame_ids, poses_gt)
    write_trajectory(root / "trajectory_noisy.txt", frame_ids, poses_noisy)
    for sub, obs_list in (
        (("depth", "uncertainty"), observations_clean),
        (("depth_noisy", "uncertainty_noisy"), observations_noisy),
    ):
        ddir = root / sub[0]
        udir = root / sub[1]
        ddir.mkdir(exist_ok=True)
        udir.mkdir(exist_ok=True)
        for obs in obs_list:
            write_dmap(ddir / depth_map_name(obs.frame_id), obs.depth.values)
            if obs.uncertainty is not None:
                write_dmap(udir / uncertainty_map_name(obs.frame_id), obs.uncertainty.values)
    (root / "manifest.yaml").write_text(
        yaml.safe_dump(manifest, sort_keys=True), newline="\n")
    return root


def load_dataset(root: str | Path) -> PhantomDataset:
    root = Path(root)
    for required in ("mesh_gt.ply", "intrinsics.yaml", "trajectory_gt.txt", "manifest.yaml"):
        if not (root / required).exists():
            raise FileNotFoundError(f"dataset is missing {required} under {root}")
    mesh = read_mesh_ply(root / "mesh_gt.ply")
    intrinsics = read_intrinsics(root / "intrinsics.yaml")
    frame_ids, poses_gt = read_trajectory(root / "trajectory_gt.txt")
    noisy_path = root / "trajectory_noisy.txt"
    if noisy_path.exists():
        _, poses_noisy = read_trajectory(noisy_path)
    else:
        poses_noisy = list(poses_gt)
    manifest = yaml.safe_load((root / "manifest.yaml").read_text())
    return PhantomDataset(
        root=root, mesh_gt=mesh, intrinsics=intrinsics, frame_ids=frame_ids,
        poses_gt=poses_gt, poses_noisy=poses_noisy, manifest=manifest,
    )
