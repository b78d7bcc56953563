"""File formats: "DNF1" field checkpoints, "DNFD" depth rasters, 8-bit PNG
images, and ASCII OBJ meshes.

Checkpoints store a JSON header (config echo plus named sections) followed by
flat little-endian f32 parameter payloads, so a save/load round trip of an f32
field is bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import CheckpointError
from .field import RadianceField

CHECKPOINT_MAGIC = b"DNF1"
DEPTH_MAGIC = b"DNFD"
CHECKPOINT_VERSION = 1


def _flat_f32(tensors: list[Tensor]) -> bytes:
    parts = [t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes() for t in tensors]
    return b"".join(parts)


def save_checkpoint(path, field: RadianceField, extra: dict | None = None) -> None:
    """Write a field to a DNF1 container.

    Sections "grid" and "mlp" record per-tensor shapes and their float offset
    into the payload; ``extra`` lands in the header for provenance (stage,
    iteration, seed).
    """
    grid_tensors = [field.grid]
    mlp_tensors = field.mlp_parameters()

    sections = {}
    offset = 0
    for name, tensors in (("grid", grid_tensors), ("mlp", mlp_tensors)):
        shapes = [list(t.shape) for t in tensors]
        sections[name] = {"offset": offset, "shapes": shapes}
        offset += sum(int(np.prod(s)) for s in shapes)

    header = {
        "version": CHECKPOINT_VERSION,
        "options": field.options_dict(),
        "sections": sections,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = _flat_f32(grid_tensors + mlp_tensors)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path) -> tuple[RadianceField, dict]:
    """Read a DNF1 container back into a fresh f32 field.

    Raises CheckpointError on magic/version mismatch, malformed header, or a
    payload whose size disagrees with the recorded sections.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a DNF1 checkpoint")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if 8 + header_len > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    if (len(blob) - 8 - header_len) % 4 != 0:
        raise CheckpointError(f"{path}: payload is not whole f32 words")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")

    try:
        field = RadianceField.from_options(header["options"])
        sections = header["sections"]
        grid_meta, mlp_meta = sections["grid"], sections["mlp"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed header ({e})") from e

    payload = np.frombuffer(blob[8 + header_len :], dtype="<f4")
    total = sum(int(np.prod(s)) for s in grid_meta["shapes"] + mlp_meta["shapes"])
    if payload.size != total:
        raise CheckpointError(f"{path}: payload holds {payload.size} floats, header says {total}")

    def take(meta, targets: list[Tensor]):
        pos = int(meta["offset"])
        for shape, target in zip(meta["shapes"], targets):
            n = int(np.prod(shape))
            chunk = torch.from_numpy(payload[pos : pos + n].copy()).reshape(shape)
            if tuple(target.shape) != tuple(chunk.shape):
                raise CheckpointError(f"{path}: section shape {shape} does not fit the field")
            with torch.no_grad():
                target.copy_(chunk)
            pos += n

    take(grid_meta, [field.grid])
    take(mlp_meta, field.mlp_parameters())
    return field, header


def write_depth_raster(path, depth: Tensor) -> None:
    """Write an (H, W) depth map as DNFD: 16-byte header then f32 LE rows."""
    h, w = depth.shape
    data = depth.detach().cpu().to(torch.float32).numpy().astype("<f4")
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<III", w, h, 0))
        f.write(data.tobytes())


def read_depth_raster(path) -> Tensor:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: unreadable depth raster ({e})") from e
    if len(blob) < 16 or blob[:4] != DEPTH_MAGIC:
        raise CheckpointError(f"{path}: not a DNFD depth raster")
    w, h, _ = struct.unpack("<III", blob[4:16])
    if (len(blob) - 16) % 4 != 0:
        raise CheckpointError(f"{path}: raster payload is not whole f32 words")
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != w * h:
        raise CheckpointError(f"{path}: raster holds {data.size} floats, header says {w * h}")
    return torch.from_numpy(data.copy()).reshape(h, w)


def write_png(path, image: Tensor) -> None:
    """Save an (H, W) or (H, W, 3) float tensor in [0, 1] as an 8-bit PNG."""
    arr = image.detach().cpu().clamp(0.0, 1.0).numpy()
    arr8 = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr8, mode="RGB" if arr8.ndim == 3 else "L").save(path)


def read_png(path) -> Tensor:
    """Load a PNG as a float tensor in [0, 1]; RGB gives (H, W, 3), grayscale (H, W)."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def normal_visualization(normals: Tensor) -> Tensor:
    """Map unit normals in [-1, 1] to displayable [0, 1] colors."""
    return (normals * 0.5 + 0.5).clamp(0.0, 1.0)


def save_contact_sheet(path, images: list[Tensor], cols: int = 4) -> None:
    """Tile equally sized (H, W, 3) images into one PNG grid."""
    if not images:
        raise ValueError("contact sheet needs at least one image")
    h, w, _ = images[0].shape
    cols = min(cols, len(images))
    rows = (len(images) + cols - 1) // cols
    sheet = torch.ones(rows * h, cols * w, 3)
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        sheet[r * h : (r + 1) * h, c * w : (c + 1) * w] = img
    write_png(path, sheet)


def save_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Write a triangle mesh as ASCII OBJ (1-indexed faces)."""
    with open(path, "w") as f:
        f.write("# distillfield mesh export\n")
        for v in vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for face in faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")
