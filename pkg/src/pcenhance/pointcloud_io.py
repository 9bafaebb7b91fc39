"""Colored point cloud container, PLY reader/writer and RGB <-> YCbCr conversion.

The color transform is full-range 8-bit ITU-R BT.709::

    Y  = 0.2126 R + 0.7152 G + 0.0722 B
    Cb = (B - Y) / 1.8556 + 128
    Cr = (R - Y) / 1.5748 + 128

and its exact inverse::

    R = Y + 1.5748 (Cr - 128)
    B = Y + 1.8556 (Cb - 128)
    G = (Y - 0.2126 R - 0.0722 B) / 0.7152

Results are clamped to [0, 255]. Which matrix the reference codec data used is
not documented anywhere we could find; BT.709 is what the MPEG common test
conditions use, so it is the assumption here.
"""

from __future__ import annotations

import enum
import os
import re
from dataclasses import dataclass

import numpy as np

KR, KG, KB = 0.2126, 0.7152, 0.0722
CB_SCALE = 2.0 * (1.0 - KB)  # 1.8556
CR_SCALE = 2.0 * (1.0 - KR)  # 1.5748
CHROMA_OFFSET = 128.0

CHANNELS = ("Y", "Cb", "Cr")


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    YCBCR = "YCbCr"


class PlyError(ValueError):
    """Raised for PLY files that cannot be parsed or lack required properties."""


class ColorSpaceError(RuntimeError):
    """Raised when a conversion is applied to a cloud in the wrong color space."""


@dataclass
class PointCloud:
    geometry: np.ndarray
    attributes: np.ndarray
    color_space: ColorSpace = ColorSpace.RGB

    def __post_init__(self):
        self.geometry = np.asarray(self.geometry, dtype=np.float64)
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        self.color_space = ColorSpace(self.color_space)
        if self.geometry.ndim != 2 or self.geometry.shape[1] != 3:
            raise ValueError(f"geometry must be N x 3, got {self.geometry.shape}")
        if self.attributes.shape != self.geometry.shape:
            raise ValueError(
                f"attributes shape {self.attributes.shape} does not match geometry {self.geometry.shape}"
            )
        if len(self.geometry) == 0:
            raise ValueError("empty cloud")

    def __len__(self) -> int:
        return len(self.geometry)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.color_space == other.color_space
            and np.array_equal(self.geometry, other.geometry)
            and np.array_equal(self.attributes, other.attributes)
        )

    def channel(self, name: str) -> np.ndarray:
        """Return one attribute column by name (Y/Cb/Cr or R/G/B)."""
        return self.attributes[:, channel_index(name)]

    def with_attributes(self, attributes: np.ndarray) -> "PointCloud":
        return PointCloud(self.geometry.copy(), np.asarray(attributes, dtype=np.float64).copy(), self.color_space)

    def copy(self) -> "PointCloud":
        return PointCloud(self.geometry.copy(), self.attributes.copy(), self.color_space)


def channel_index(name: str) -> int:
    lookup = {"Y": 0, "Cb": 1, "Cr": 2, "R": 0, "G": 1, "B": 2}
    try:
        return lookup[name]
    except KeyError:
        raise ValueError(f"unknown channel {name!r}; expected one of Y, Cb, Cr") from None


# --------------------------------------------------------------------------
# color conversion
# --------------------------------------------------------------------------

def rgb_to_ycbcr(pc: PointCloud) -> PointCloud:
    if pc.color_space is not ColorSpace.RGB:
        raise ColorSpaceError(f"expected an RGB cloud, got {pc.color_space.value}")
    r, g, b = pc.attributes.T
    y = KR * r + KG * g + KB * b
    cb = (b - y) / CB_SCALE + CHROMA_OFFSET
    cr = (r - y) / CR_SCALE + CHROMA_OFFSET
    out = np.clip(np.stack([y, cb, cr], axis=1), 0.0, 255.0)
    return PointCloud(pc.geometry.copy(), out, ColorSpace.YCBCR)


def ycbcr_to_rgb(pc: PointCloud) -> PointCloud:
    if pc.color_space is not ColorSpace.YCBCR:
        raise ColorSpaceError(f"expected a YCbCr cloud, got {pc.color_space.value}")
    y, cb, cr = pc.attributes.T
    r = y + CR_SCALE * (cr - CHROMA_OFFSET)
    b = y + CB_SCALE * (cb - CHROMA_OFFSET)
    g = (y - KR * r - KB * b) / KG
    out = np.clip(np.stack([r, g, b], axis=1), 0.0, 255.0)
    return PointCloud(pc.geometry.copy(), out, ColorSpace.RGB)


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_REQUIRED_COLORS = ("red", "green", "blue")


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PlyError("parse error at byte 0: missing 'ply' magic")
    end = re.search(rb"end_header\r?\n", data)
    if end is None:
        raise PlyError(f"parse error at byte {len(data)}: no end_header line")
    body_offset = end.end()

    fmt = None
    color_space = ColorSpace.RGB
    elements = []  # [name, count, [(prop, dtype)]]
    offset = 0
    for raw in data[:body_offset].splitlines(keepends=True):
        line = raw.decode("ascii", errors="replace").strip()
        words = line.split()
        line_offset = offset
        offset += len(raw)
        if words[:2] == ["comment", "color_space"] and len(words) == 3:
            color_space = ColorSpace(words[2])
            continue
        if not words or words[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if words[0] == "format":
            if len(words) < 3:
                raise PlyError(f"parse error at byte {line_offset}: bad format line")
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PlyError(f"parse error at byte {line_offset}: bad element line {line!r}")
            elements.append([words[1], int(words[2]), []])
        elif words[0] == "property":
            if not elements:
                raise PlyError(f"parse error at byte {line_offset}: property before any element")
            if words[1] == "list":
                if len(words) != 5 or words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise PlyError(f"parse error at byte {line_offset}: bad list property")
                elements[-1][2].append((words[4], ("list", _PLY_TYPES[words[2]], _PLY_TYPES[words[3]])))
            else:
                if len(words) != 3 or words[1] not in _PLY_TYPES:
                    raise PlyError(f"parse error at byte {line_offset}: unknown property type in {line!r}")
                elements[-1][2].append((words[2], _PLY_TYPES[words[1]]))
        else:
            raise PlyError(f"parse error at byte {line_offset}: unexpected header keyword {words[0]!r}")

    if fmt is None:
        raise PlyError("parse error at byte 0: no format line")
    if fmt == "binary_big_endian":
        raise PlyError("binary_big_endian PLY is not supported; convert to little endian or ascii")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"parse error: unknown format {fmt!r}")
    return fmt, elements, body_offset, color_space


def _read_binary_element(data: bytes, pos: int, count: int, props):
    if all(not isinstance(t, tuple) for _, t in props):
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        nbytes = dtype.itemsize * count
        if pos + nbytes > len(data):
            raise PlyError(f"parse error at byte {len(data)}: truncated binary body")
        return np.frombuffer(data, dtype=dtype, count=count, offset=pos), pos + nbytes
    # list properties (faces etc.) have to be walked record by record
    rows = []
    for _ in range(count):
        row = {}
        for name, t in props:
            if isinstance(t, tuple):
                cnt_t, item_t = np.dtype("<" + t[1]), np.dtype("<" + t[2])
                n = int(np.frombuffer(data, cnt_t, 1, pos)[0])
                pos += cnt_t.itemsize
                row[name] = np.frombuffer(data, item_t, n, pos)
                pos += item_t.itemsize * n
            else:
                dt = np.dtype("<" + t)
                row[name] = np.frombuffer(data, dt, 1, pos)[0]
                pos += dt.itemsize
        rows.append(row)
    return rows, pos


def load_ply(path) -> PointCloud:
    """Read a colored point cloud (x, y, z, red, green, blue) from PLY.

    Colors are RGB unless the file carries the ``comment color_space YCbCr``
    line that :func:`save_ply` writes for YCbCr clouds.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, body, color_space = _parse_header(data)
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise PlyError("no vertex element in header")

    if fmt == "ascii":
        tokens = data[body:].split()
        pos = 0
        vertex = None
        for name, count, props in elements:
            if name == "vertex":
                if any(isinstance(t, tuple) for _, t in props):
                    raise PlyError("list properties on vertex are not supported")
                width = len(props)
                chunk = tokens[pos:pos + width * count]
                if len(chunk) < width * count:
                    raise PlyError(f"parse error at byte {len(data)}: truncated ascii body")
                try:
                    values = np.array([float(t) for t in chunk], dtype=np.float64).reshape(count, width)
                except ValueError as exc:
                    raise PlyError(f"parse error in ascii vertex data: {exc}") from None
                vertex = {p: values[:, i] for i, (p, _) in enumerate(props)}
                pos += width * count
            else:
                # skip other elements token by token
                for _ in range(count):
                    for _, t in props:
                        if isinstance(t, tuple):
                            n = int(tokens[pos])
                            pos += 1 + n
                        else:
                            pos += 1
    else:
        pos = body
        vertex = None
        for name, count, props in elements:
            arr, pos = _read_binary_element(data, pos, count, props)
            if name == "vertex":
                if isinstance(arr, list):
                    raise PlyError("list properties on vertex are not supported")
                vertex = {p: arr[p] for p, _ in props}

    for axis in ("x", "y", "z"):
        if axis not in vertex:
            raise PlyError(f"geometry property {axis!r} absent")
    if not all(c in vertex for c in _REQUIRED_COLORS):
        raise PlyError("attributes absent: vertex needs red, green and blue properties")

    geometry = np.stack([np.asarray(vertex[a], dtype=np.float64) for a in ("x", "y", "z")], axis=1)
    attributes = np.stack([np.asarray(vertex[c], dtype=np.float64) for c in _REQUIRED_COLORS], axis=1)
    return PointCloud(geometry, attributes, color_space)


def quantize_attributes(attributes: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(attributes), 0, 255).astype(np.uint8)


def save_ply(pc: PointCloud, path, format: str = "binary_le") -> None:
    """Write ``pc`` as PLY. Coordinates are stored as float64, colors as uint8.

    ``format`` is ``"ascii"`` or ``"binary_le"``. Attributes are rounded and
    clipped to 8 bit here; this is the only place they are quantized.
    """
    if len(pc) == 0:
        raise ValueError("empty cloud")
    if format not in ("ascii", "binary_le"):
        raise ValueError(f"unknown PLY format {format!r}")
    n = len(pc)
    colors = quantize_attributes(pc.attributes)
    ply_format = "ascii" if format == "ascii" else "binary_little_endian"
    header = (
        "ply\n"
        f"format {ply_format} 1.0\n"
        f"comment color_space {pc.color_space.value}\n"
        f"element vertex {n}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    ).encode("ascii")

    if format == "binary_le":
        dtype = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                          ("red", "u1"), ("green", "u1"), ("blue", "u1")])
        rec = np.empty(n, dtype=dtype)
        rec["x"], rec["y"], rec["z"] = pc.geometry.T
        rec["red"], rec["green"], rec["blue"] = colors.T
        body = rec.tobytes()
    else:
        lines = [
            f"{x!r} {y!r} {z!r} {r} {g} {b}"
            for (x, y, z), (r, g, b) in zip(pc.geometry.tolist(), colors.tolist())
        ]
        body = ("\n".join(lines) + "\n").encode("ascii")

    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(body)
    os.replace(tmp, path)
