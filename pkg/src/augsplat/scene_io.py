"""Scene PLY files, depth maps, PNG images and on-disk datasets."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera
from .errors import DimensionMismatch, MissingImage, ParseError, VersionMismatch
from .primitives import GaussianCloud, num_sh_coeffs, sh_order_from_count

FORMAT_VERSION = 1
DEPTH_MAGIC = b"AUGDEPTH"

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


# ---------------------------------------------------------------------------
# PLY


def _vertex_fields(sh_order: int, lobes: bool) -> list[str]:
    k = num_sh_coeffs(sh_order)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    if lobes:
        names += ["lobe_dir_x", "lobe_dir_y", "lobe_dir_z", "lobe_t", "lobe_beta"]
    return names


def save_scene(cloud: GaussianCloud, path, precision: str = "float") -> None:
    """Write a 3DGS-layout binary PLY; lobe columns are appended only when present.

    ``lobe_t == 0`` marks a primitive without a lobe. ``precision`` is
    ``"float"`` (the usual float32 layout) or ``"double"``.
    """
    if precision not in ("float", "double"):
        raise ValueError("precision must be 'float' or 'double'")
    n = len(cloud)
    k = cloud.sh.shape[1]
    lobes = bool(cloud.has_lobe.any())
    names = _vertex_fields(cloud.sh_order, lobes)
    dtype = np.dtype([(nm, "<f4" if precision == "float" else "<f8") for nm in names])
    data = np.zeros(n, dtype=dtype)
    for i, axis in enumerate("xyz"):
        data[axis] = cloud.positions[:, i]
    for c in range(3):
        data[f"f_dc_{c}"] = cloud.sh[:, 0, c]
    # channel-major: all coefficients of R, then G, then B
    for c in range(3):
        for j in range(1, k):
            data[f"f_rest_{c * (k - 1) + j - 1}"] = cloud.sh[:, j, c]
    data["opacity"] = cloud.opacity_logits
    for i in range(3):
        data[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        data[f"rot_{i}"] = cloud.quats[:, i]
    if lobes:
        for i, axis in enumerate("xyz"):
            data[f"lobe_dir_{axis}"] = cloud.lobe_dirs[:, i]
        data["lobe_t"] = np.where(cloud.has_lobe, cloud.lobe_T, 0.0)
        data["lobe_beta"] = cloud.lobe_beta
    header = ["ply", "format binary_little_endian 1.0",
              f"comment augsplat_version {FORMAT_VERSION}",
              f"comment sh_degree {cloud.sh_order}",
              f"comment plain_count {int(n - cloud.has_lobe.sum())}",
              f"comment enhanced_count {int(cloud.has_lobe.sum())}",
              f"element vertex {n}"]
    header += [f"property {precision} {nm}" for nm in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file or missing end_header", 0)
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise ParseError("header not terminated", end)
    body_start = nl + 1
    elements, comments, fmt = [], {}, None
    offset = 0
    for line in raw[:body_start].split(b"\n"):
        pos = offset
        offset += len(line) + 1
        parts = line.decode("ascii", errors="replace").strip().split()
        if not parts or parts[0] in ("ply", "end_header", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "comment":
            if len(parts) >= 3:
                comments[parts[1]] = parts[2]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise ParseError(f"bad element line {line!r}", pos)
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", pos)
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property line {line!r}", pos)
            elements[-1][2].append((parts[2], "<" + _PLY_TYPES[parts[1]]))
        else:
            raise ParseError(f"unknown header keyword {parts[0]!r}", pos)
    if fmt != "binary_little_endian":
        raise ParseError(f"unsupported PLY format {fmt!r}", 0)
    return elements, comments, body_start


def load_scene(path) -> GaussianCloud:
    """Read a scene PLY written by :func:`save_scene` or by a plain 3DGS trainer."""
    raw = Path(path).read_bytes()
    elements, comments, offset = _parse_header(raw)
    version = comments.get("augsplat_version")
    if version is not None and version != str(FORMAT_VERSION):
        raise VersionMismatch(f"scene format version {version}, expected {FORMAT_VERSION}")
    vertex = None
    for name, count, props in elements:
        dtype = np.dtype(props)
        size = dtype.itemsize * count
        if offset + size > len(raw):
            raise ParseError(f"element {name!r} truncated: need {size} bytes", offset)
        if name == "vertex":
            vertex = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += size
    if vertex is None:
        raise ParseError("no vertex element", 0)
    names = vertex.dtype.names
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    missing = [r for r in required if r not in names]
    if missing:
        raise ParseError(f"missing vertex properties {missing}", 0)
    n_rest = sum(1 for nm in names if nm.startswith("f_rest_"))
    if n_rest % 3:
        raise ParseError(f"f_rest count {n_rest} not divisible by 3", 0)
    k = 1 + n_rest // 3
    try:
        order = sh_order_from_count(k)
    except ValueError as exc:
        raise ParseError(str(exc), 0) from None
    if "sh_degree" in comments and comments["sh_degree"] != str(order):
        raise ParseError(f"sh_degree {comments['sh_degree']} disagrees with {n_rest} f_rest fields", 0)

    def col(nm):
        return vertex[nm].astype(np.float64)

    n = len(vertex)
    sh = np.zeros((n, k, 3))
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
        for j in range(1, k):
            sh[:, j, c] = col(f"f_rest_{c * (k - 1) + j - 1}")
    if "lobe_t" in names:
        lobe_T = col("lobe_t")
        has_lobe = lobe_T != 0.0
        lobe_dirs = np.stack([col("lobe_dir_x"), col("lobe_dir_y"), col("lobe_dir_z")], axis=1)
        lobe_beta = col("lobe_beta")
        lobe_T = np.where(has_lobe, lobe_T, 1.0)
        lobe_dirs[~has_lobe] = (0.0, 0.0, 1.0)
    else:
        has_lobe = np.zeros(n, dtype=bool)
        lobe_dirs = np.tile([0.0, 0.0, 1.0], (n, 1))
        lobe_T, lobe_beta = np.ones(n), np.zeros(n)
    return GaussianCloud(
        positions=np.stack([col("x"), col("y"), col("z")], axis=1),
        quats=np.stack([col(f"rot_{i}") for i in range(4)], axis=1),
        log_scales=np.stack([col(f"scale_{i}") for i in range(3)], axis=1),
        opacity_logits=col("opacity"),
        sh=sh, lobe_dirs=lobe_dirs, lobe_T=lobe_T, lobe_beta=lobe_beta, has_lobe=has_lobe,
    )


# ---------------------------------------------------------------------------
# depth maps and images


def save_depth(depth, path) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise DimensionMismatch(f"depth map must be 2D, got {depth.shape}")
    H, W = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", W, H))
        fh.write(depth.tobytes())


def load_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != DEPTH_MAGIC:
        raise ParseError("bad depth magic", 0)
    if len(raw) < 16:
        raise ParseError("depth header truncated", len(raw))
    W, H = struct.unpack("<II", raw[8:16])
    if len(raw) != 16 + 4 * W * H:
        raise ParseError(f"depth payload is {len(raw) - 16} bytes, expected {4 * W * H}", 16)
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(H, W).astype(np.float64)


def load_image(path) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingImage(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(img, path) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetView:
    image: np.ndarray
    camera: Camera
    name: str

    @property
    def split(self) -> str:
        return self.camera.split


def load_dataset(directory) -> list[DatasetView]:
    """Views of ``directory/cameras.json`` with their images, sorted by id."""
    directory = Path(directory)
    cam_file = directory / "cameras.json"
    if not cam_file.exists():
        raise MissingImage(cam_file)
    try:
        records = json.loads(cam_file.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"cameras.json: {exc.msg}", exc.pos) from None
    views = []
    for rec in records:
        cam = Camera.from_dict(rec)
        if not cam.image_path:
            raise MissingImage(f"camera {rec.get('id')!r} has no image_path")
        img_path = directory / cam.image_path
        img = load_image(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise DimensionMismatch(f"{img_path}: image {img.shape[1]}x{img.shape[0]} "
                                    f"but camera says {cam.width}x{cam.height}")
        name = cam.name or Path(cam.image_path).stem
        views.append(DatasetView(img, cam, name))
    views.sort(key=lambda v: v.name)
    return views


def save_dataset(directory, images, cameras, names=None) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, cam) in enumerate(zip(images, cameras)):
        name = names[i] if names else f"view_{i:03d}"
        rel = f"images/{name}.png"
        save_image(img, directory / rel)
        cam.image_path = rel
        cam.name = name
        records.append(cam.to_dict())
    (directory / "cameras.json").write_text(json.dumps(records, indent=1))
