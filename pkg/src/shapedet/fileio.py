"""On-disk formats.

Text formats use repr() for floats so every value round-trips bitwise.
Binary grids are a one-line JSON header (dims, spacing, dtype) followed by a
little-endian raw blob; checkpoints are a one-line JSON manifest followed by
little-endian float32 blobs in manifest order.
"""

import hashlib
import json
import os

import numpy as np

from .detection import BoundingBox
from .errors import ConfigMismatch, CorruptFile
from .geometry import CorrespondenceSet, Frame, TemplateShape, TriangleMesh

CHECKPOINT_FORMAT = "shapedet-checkpoint-1"

_GRID_DTYPES = {"f4": np.dtype("<f4"), "u1": np.dtype("u1")}


def _fmt(x):
    return repr(float(x))


# -- particle files: one point per line, three space-separated decimals --


def write_particles(points, path):
    pts = points.points if isinstance(points, CorrespondenceSet) else np.asarray(points, dtype=float)
    with open(path, "w") as f:
        for p in pts:
            f.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")


def read_particles(path, frame=None, anatomy=0):
    pts = []
    offset = 0
    with open(path, "r") as f:
        for line in f:
            parts = line.split()
            if parts:
                if len(parts) != 3:
                    raise CorruptFile(
                        f"particle line needs 3 values, got {len(parts)}", offset=offset
                    )
                try:
                    pts.append([float(v) for v in parts])
                except ValueError as exc:
                    raise CorruptFile(f"bad particle value: {exc}", offset=offset) from exc
            offset += len(line.encode())
    arr = np.asarray(pts, dtype=float).reshape(-1, 3)
    if frame is None:
        return arr
    return CorrespondenceSet(arr, frame, anatomy)


# -- Wavefront OBJ meshes --


def write_obj(mesh, path):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for face in mesh.faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


def read_obj(path):
    vertices, faces = [], []
    offset = 0
    with open(path, "r") as f:
        for line in f:
            parts = line.split()
            try:
                if parts and parts[0] == "v":
                    vertices.append([float(v) for v in parts[1:4]])
                elif parts and parts[0] == "f":
                    faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
            except (ValueError, IndexError) as exc:
                raise CorruptFile(f"bad OBJ line: {exc}", offset=offset) from exc
            offset += len(line.encode())
    if not vertices:
        raise CorruptFile("OBJ file contains no vertices", offset=0)
    return TriangleMesh(np.asarray(vertices, dtype=float), np.asarray(faces, dtype=int))


def write_dist_sidecar(values, path):
    """One scalar per vertex line, paired with an exported OBJ."""
    with open(path, "w") as f:
        for v in np.asarray(values, dtype=float).reshape(-1):
            f.write(f"{_fmt(v)}\n")


def read_dist_sidecar(path):
    with open(path, "r") as f:
        return np.array([float(line) for line in f if line.strip()], dtype=float)


# -- binary grids: JSON header line + little-endian raw blob --


def write_grid(array, path, spacing=(1.0, 1.0, 1.0)):
    array = np.asarray(array)
    if array.dtype == np.bool_ or array.dtype == np.uint8:
        code, out = "u1", array.astype("u1")
    else:
        code, out = "f4", array.astype("<f4")
    header = json.dumps(
        {"dims": list(array.shape), "spacing": list(map(float, spacing)), "dtype": code}
    )
    with open(path, "wb") as f:
        f.write(header.encode() + b"\n")
        f.write(out.tobytes(order="C"))


def read_grid(path):
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode())
            dims = tuple(int(d) for d in header["dims"])
            spacing = tuple(float(s) for s in header["spacing"])
            dtype = _GRID_DTYPES[header["dtype"]]
        except (ValueError, KeyError) as exc:
            raise CorruptFile(f"bad grid header: {exc}", offset=0) from exc
        expected = int(np.prod(dims)) * dtype.itemsize
        blob = f.read()
    if len(blob) != expected:
        raise CorruptFile(
            f"grid blob has {len(blob)} bytes, expected {expected}",
            offset=len(header_line) + len(blob),
        )
    array = np.frombuffer(blob, dtype=dtype).reshape(dims)
    return array.copy(), spacing


def write_volume(array, path, spacing=(1.0, 1.0, 1.0)):
    write_grid(np.asarray(array, dtype=np.float32), path, spacing)


def read_volume(path):
    array, spacing = read_grid(path)
    if array.dtype != np.float32:
        raise CorruptFile(f"expected f4 volume, found {array.dtype}", offset=0)
    return array, spacing


def write_mask(array, path, spacing=(1.0, 1.0, 1.0)):
    write_grid(np.asarray(array, dtype=bool), path, spacing)


def read_mask(path):
    array, spacing = read_grid(path)
    if array.dtype != np.uint8:
        raise CorruptFile(f"expected u1 mask, found {array.dtype}", offset=0)
    return array.astype(bool), spacing


# -- detection box lists: `k cx cy cz rx ry rz confidence` per line --


def write_boxes(boxes, path):
    with open(path, "w") as f:
        for b in boxes:
            fields = [str(int(b.anatomy))]
            fields += [_fmt(v) for v in b.center]
            fields += [_fmt(v) for v in b.radii]
            fields.append(_fmt(b.confidence))
            f.write(" ".join(fields) + "\n")


def read_boxes(path):
    boxes = []
    offset = 0
    with open(path, "r") as f:
        for line in f:
            parts = line.split()
            if parts:
                if len(parts) != 8:
                    raise CorruptFile(
                        f"box line needs 8 values, got {len(parts)}", offset=offset
                    )
                try:
                    boxes.append(
                        BoundingBox(
                            anatomy=int(parts[0]),
                            center=np.array([float(v) for v in parts[1:4]]),
                            radii=np.array([float(v) for v in parts[4:7]]),
                            confidence=float(parts[7]),
                        )
                    )
                except ValueError as exc:
                    raise CorruptFile(f"bad box value: {exc}", offset=offset) from exc
            offset += len(line.encode())
    return boxes


# -- template bundles: one directory per anatomy --


def write_template_bundle(templates, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for template in templates:
        sub = os.path.join(out_dir, f"anatomy_{template.anatomy}")
        os.makedirs(sub, exist_ok=True)
        write_particles(template.local_template, os.path.join(sub, "local.particles"))
        write_particles(template.world_template, os.path.join(sub, "world.particles"))
        write_obj(template.surface_mesh, os.path.join(sub, "mesh.obj"))


def read_template_bundle(bundle_dir):
    names = sorted(
        (n for n in os.listdir(bundle_dir) if n.startswith("anatomy_")),
        key=lambda n: int(n.split("_", 1)[1]),
    )
    if not names:
        raise CorruptFile(f"no anatomy_* directories under {bundle_dir}", offset=0)
    templates = []
    for name in names:
        anatomy = int(name.split("_", 1)[1])
        sub = os.path.join(bundle_dir, name)
        templates.append(
            TemplateShape(
                anatomy=anatomy,
                local_template=read_particles(
                    os.path.join(sub, "local.particles"), Frame.LOCAL, anatomy
                ),
                world_template=read_particles(
                    os.path.join(sub, "world.particles"), Frame.WORLD, anatomy
                ),
                surface_mesh=read_obj(os.path.join(sub, "mesh.obj")),
            )
        )
    return templates


# -- checkpoints: JSON manifest line + float32 blobs in manifest order --


def config_hash(config_dict):
    """Stable hash of a JSON-serializable config."""
    canonical = json.dumps(config_dict, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def save_checkpoint(path, config_digest, epoch, named_arrays, extra=None):
    entries = []
    blobs = []
    for name, array in named_arrays.items():
        arr = np.asarray(array, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_digest,
        "epoch": int(epoch),
        "entries": entries,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode() + b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path, expected_config_digest=None):
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            manifest = json.loads(header_line.decode())
        except ValueError as exc:
            raise CorruptFile(f"bad checkpoint manifest: {exc}", offset=0) from exc
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CorruptFile(f"unknown checkpoint format {manifest.get('format')}", offset=0)
        if expected_config_digest is not None and manifest["config_hash"] != expected_config_digest:
            raise ConfigMismatch(
                f"checkpoint config hash {manifest['config_hash']} "
                f"does not match expected {expected_config_digest}"
            )
        arrays = {}
        offset = len(header_line)
        for entry in manifest["entries"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            blob = f.read(count * 4)
            if len(blob) != count * 4:
                raise CorruptFile(
                    f"checkpoint blob for {entry['name']} truncated",
                    offset=offset + len(blob),
                )
            arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).copy()
            offset += len(blob)
    return manifest, arrays
