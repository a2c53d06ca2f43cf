# src/core/storage.py

"""
On-disk formats: the FVSR tensor container, binary PGM/PPM images and the dataset layout
(manifest.yaml + clips/<id>/{hr,lr}.fvsr).
"""

import logging
import os
import re
import struct

import numpy as np
import yaml

from core.errors import ContainerError, ContractError, DimensionError, ImageFormatError

MAGIC = b"FVSR"
VERSION = 1
DTYPE_CODES = {("f", 4): 0, ("f", 8): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
MANIFEST_FILE = "manifest.yaml"
CLIPS_DIR = "clips"


# --- Tensor Container ---

def encode_tensors(tensors):
    """Serialises an ordered {name: ndarray} mapping (float32/float64 only)."""
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, value in tensors.items():
        array = np.asarray(value)
        key = (array.dtype.kind, array.dtype.itemsize)
        if key not in DTYPE_CODES:
            raise ContractError(f"Tensor '{name}' has unsupported dtype {array.dtype}; use float32 or float64")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", DTYPE_CODES[key], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=CODE_DTYPES[DTYPE_CODES[key]]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buffer):
        self.buffer = buffer
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.buffer):
            raise ContainerError(f"Truncated container while reading {what}", self.offset)
        chunk = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(buffer):
    reader = _Reader(bytes(buffer))
    if reader.take(4, "magic") != MAGIC:
        raise ContainerError("Not an FVSR container (bad magic)", 0)
    version, count = reader.unpack("<HI", "header")
    if version != VERSION:
        raise ContainerError(f"Unsupported container version {version}, expected {VERSION}", 4)
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        start = reader.offset
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError("Entry name is not valid UTF-8", start)
        code_offset = reader.offset
        code, rank = reader.unpack("<BB", "dtype and rank")
        if code not in CODE_DTYPES:
            raise ContainerError(f"Unknown dtype code {code} for '{name}'", code_offset)
        dims = reader.unpack(f"<{rank}Q", "dims")
        dims_offset = reader.offset - 8 * rank
        dtype = CODE_DTYPES[code]
        extent = 1
        for d in dims:
            extent *= max(d, 1)
        if extent * dtype.itemsize > np.iinfo(np.intp).max:
            raise ContainerError(f"Dims {dims} of '{name}' exceed the addressable size", dims_offset)
        size = float(np.prod(dims, dtype=np.float64)) * dtype.itemsize
        if size > len(reader.buffer) - reader.offset:
            raise ContainerError(f"Truncated container while reading payload of '{name}'", reader.offset)
        nbytes = int(size)
        payload = reader.take(nbytes, f"payload of '{name}'")
        try:
            array = np.frombuffer(payload, dtype=dtype).reshape(dims)
        except ValueError as e:
            raise ContainerError(f"Cannot shape '{name}' as {dims}: {e}", dims_offset)
        tensors[name] = array.astype(dtype.newbyteorder("="), copy=True)
    if reader.offset != len(reader.buffer):
        raise ContainerError(f"{len(reader.buffer) - reader.offset} trailing bytes after last entry", reader.offset)
    return tensors


def save_tensors(path, tensors):
    data = encode_tensors(tensors)
    with open(path, "wb") as f:
        f.write(data)


def load_tensors(path):
    with open(path, "rb") as f:
        return decode_tensors(f.read())


# --- Images ---

def _to_bytes(frame):
    return np.floor(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_pgm(path, frame):
    """Writes a (H, W) or (1, H, W) frame in [0, 1] as binary P5."""
    frame = np.asarray(frame)
    if frame.ndim == 3 and frame.shape[0] == 1:
        frame = frame[0]
    if frame.ndim != 2:
        raise DimensionError(f"save_pgm expects a single-channel frame, got shape {frame.shape}", axis=0)
    h, w = frame.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(_to_bytes(frame).tobytes())


def save_ppm(path, frame):
    """Writes a (3, H, W) frame in [0, 1] as binary P6."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise DimensionError(f"save_ppm expects a (3, H, W) frame, got shape {frame.shape}", axis=0)
    _, h, w = frame.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(_to_bytes(frame.transpose(1, 2, 0)).tobytes())


_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def _load_netpbm(path):
    with open(path, "rb") as f:
        data = f.read()
    match = _HEADER.match(data)
    if match is None:
        raise ImageFormatError(f"{path}: malformed PGM/PPM header")
    magic, w, h, maxval = match.group(1), int(match.group(2)), int(match.group(3)), int(match.group(4))
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    pixels = data[match.end():]
    if len(pixels) != w * h * channels:
        raise ImageFormatError(f"{path}: expected {w * h * channels} pixel bytes, found {len(pixels)}")
    array = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64) / 255.0
    return magic, array.reshape(h, w, channels)


def load_pgm(path):
    magic, array = _load_netpbm(path)
    if magic != b"P5":
        raise ImageFormatError(f"{path}: expected a P5 image, found {magic.decode()}")
    return array[..., 0]


def load_ppm(path):
    magic, array = _load_netpbm(path)
    if magic != b"P6":
        raise ImageFormatError(f"{path}: expected a P6 image, found {magic.decode()}")
    return array.transpose(2, 0, 1)


def save_frame(path_stem, frame):
    """Writes PGM for single-channel frames and PPM otherwise; returns the path used."""
    frame = np.asarray(frame)
    if frame.ndim == 2 or frame.shape[0] == 1:
        path = f"{path_stem}.pgm"
        save_pgm(path, frame)
    else:
        path = f"{path_stem}.ppm"
        save_ppm(path, frame)
    return path


# --- Dataset Layout ---

def _clip_tensors(clip):
    out = {"frames": np.asarray(clip.frames)}
    if clip.flow is not None:
        out["flow"] = np.asarray(clip.flow)
    return out


def write_dataset(root, entries):
    """
    entries: list of (manifest_entry dict, hr Clip, lr Clip). The manifest lists clips in
    the given order; each clip gets clips/<id>/hr.fvsr and lr.fvsr.
    """
    os.makedirs(os.path.join(root, CLIPS_DIR), exist_ok=True)
    manifest = []
    for entry, hr, lr in entries:
        clip_dir = os.path.join(root, CLIPS_DIR, entry["id"])
        os.makedirs(clip_dir, exist_ok=True)
        save_tensors(os.path.join(clip_dir, "hr.fvsr"), _clip_tensors(hr))
        save_tensors(os.path.join(clip_dir, "lr.fvsr"), _clip_tensors(lr))
        manifest.append(entry)
    with open(os.path.join(root, MANIFEST_FILE), "w") as f:
        yaml.safe_dump({"clips": manifest}, f, sort_keys=True)
    logging.info(f"Wrote {len(manifest)} clip(s) to {root}")
    return manifest


def read_manifest(root):
    path = os.path.join(root, MANIFEST_FILE)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No dataset manifest at {path}. Run 'gen-data' first.")
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return list(data.get("clips") or [])


def read_clip(root, clip_id):
    """Returns ({'frames', 'flow'?} for HR, same for LR)."""
    clip_dir = os.path.join(root, CLIPS_DIR, clip_id)
    return load_tensors(os.path.join(clip_dir, "hr.fvsr")), load_tensors(os.path.join(clip_dir, "lr.fvsr"))
