"""Mesh (OBJ subset), texture (binary PPM) and manifest (CSV) I/O.

Only ``v`` and ``f`` records of an OBJ file are read; the models consume vertex
positions and the codec keeps the face table once per sequence.  Everything
here is a pure function of its input bytes.
"""

import logging
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import (FaceArityError, FormatError, ManifestError, ObjIndexError,
                     ParseError, TopologyError)

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("mesh", "texture", "label", "frame")


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MeshFrame:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray  # (F, 3) int64, 0-based
    frame_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise TopologyError(f"vertices must be a non-empty (N, 3) array, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ParseError("non-finite vertex coordinate")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ObjIndexError(f"face index outside [0, {len(v)})")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @property
    def vertex_count(self):
        return len(self.vertices)

    def same_topology(self, other):
        return (self.vertex_count == other.vertex_count
                and np.array_equal(self.faces, other.faces))

    def __eq__(self, other):
        if not isinstance(other, MeshFrame):
            return NotImplemented
        return (self.frame_index == other.frame_index
                and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.faces, other.faces))


@dataclass(frozen=True, eq=False)
class TextureFrame:
    pixels: np.ndarray  # (H, W, 3) float
    value_range: tuple = (0.0, 255.0)

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise FormatError(f"texture must be (H, W, 3), got {p.shape}")
        lo, hi = self.value_range
        if p.size and (p.min() < lo or p.max() > hi):
            raise FormatError(f"pixel values outside declared range [{lo}, {hi}]")
        object.__setattr__(self, "pixels", _frozen(p))
        object.__setattr__(self, "value_range", (float(lo), float(hi)))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    channels = 3


@dataclass(frozen=True)
class ManifestRow:
    mesh: str
    texture: str | None
    label: str
    frame: int


@dataclass(frozen=True)
class SequenceManifest:
    rows: tuple
    label_set: tuple
    base_dir: str = field(default=".", compare=False)

    @property
    def has_texture(self):
        return bool(self.rows) and self.rows[0].texture is not None

    def label_id(self, label):
        return self.label_set.index(label)

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


# ---------------------------------------------------------------- OBJ

def _obj_index(tok, n_vertices, lineno):
    head = tok.split("/", 1)[0]
    try:
        i = int(head)
    except ValueError:
        raise ParseError(f"bad face index {tok!r}", lineno) from None
    if i < 0:
        i = n_vertices + i  # relative reference
    else:
        i -= 1
    if not 0 <= i < n_vertices:
        raise ObjIndexError(f"face index {tok} out of range (have {n_vertices} vertices)", lineno)
    return i


def parse_obj(data, frame_index=0):
    if isinstance(data, (bytes, bytearray, memoryview)):
        try:
            text = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8 text: {exc}") from None
    else:
        text = data
    verts, faces = [], []
    pending = []  # face records are resolved after all vertices are known
    ignored = Counter()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ParseError("vertex record needs 3 coordinates", lineno)
            try:
                xyz = [float(t) for t in parts[1:4]]
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {raw.strip()!r}", lineno) from None
            if not all(np.isfinite(xyz)):
                raise ParseError("non-finite coordinate", lineno)
            verts.append(xyz)
        elif tag == "f":
            if len(parts) != 4:
                raise FaceArityError(f"face has {len(parts) - 1} vertices, only triangles are accepted", lineno)
            pending.append((parts[1:], lineno))
        else:
            ignored[tag] += 1
    n = len(verts)
    for toks, lineno in pending:
        faces.append([_obj_index(t, n, lineno) for t in toks])
    if ignored:
        log.warning("ignored OBJ records: %s", ", ".join(f"{k}={v}" for k, v in sorted(ignored.items())))
    if n == 0:
        raise ParseError("no vertices")
    return MeshFrame(np.array(verts, dtype=np.float64),
                     np.array(faces, dtype=np.int64).reshape(-1, 3), frame_index)


def write_obj(frame):
    # repr is the shortest string that parses back to the same double
    lines = ["v %r %r %r" % tuple(float(c) for c in v) for v in frame.vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in frame.faces]
    return ("\n".join(lines) + "\n").encode("ascii")


# ---------------------------------------------------------------- PPM

def _ppm_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens; returns (tokens, offset)."""
    toks, i, n = [], 0, len(data)
    while len(toks) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("truncated PPM header")
        toks.append(data[start:i])
    if i >= n:
        raise FormatError("truncated PPM header")
    return toks, i + 1  # exactly one whitespace byte precedes the raster


def load_texture_ppm(data):
    data = bytes(data)
    if data[:2] != b"P6":
        raise FormatError(f"bad magic {data[:2]!r}, expected b'P6'")
    toks, off = _ppm_tokens(data[2:], 3)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise FormatError("non-integer PPM header field") from None
    if w <= 0 or h <= 0:
        raise FormatError("PPM dimensions must be positive")
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported, expected 255")
    off += 2
    need = 3 * w * h
    if len(data) - off < need:
        raise FormatError(f"payload is {len(data) - off} bytes, expected {need}")
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=off)
    return TextureFrame(px.reshape(h, w, 3).astype(np.float64), (0.0, 255.0))


def write_ppm(frame):
    lo, hi = frame.value_range
    px = (frame.pixels - lo) * (255.0 / (hi - lo)) if (lo, hi) != (0.0, 255.0) else frame.pixels
    raster = np.clip(np.rint(px), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (frame.width, frame.height) + raster.tobytes()


# ---------------------------------------------------------------- manifest

def load_manifest(data, base_dir="."):
    if isinstance(data, (bytes, bytearray)):
        data = bytes(data).decode("utf-8")
    lines = [ln.rstrip("\r") for ln in data.split("\n")]
    while lines and not lines[-1]:
        lines.pop()
    if not lines or tuple(c.strip() for c in lines[0].split(",")) != MANIFEST_HEADER:
        raise ManifestError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
    rows, labels, seen = [], [], set()
    for lineno, line in enumerate(lines[1:], 2):
        cols = line.split(",")
        if len(cols) != 4:
            raise ManifestError(f"line {lineno}: expected 4 columns, got {len(cols)}")
        mesh, tex, label, frame = (c.strip() for c in cols)
        if not mesh or not label:
            raise ManifestError(f"line {lineno}: mesh and label are required")
        try:
            frame = int(frame)
        except ValueError:
            raise ManifestError(f"line {lineno}: frame {frame!r} is not an integer") from None
        if frame < 0:
            raise ManifestError(f"line {lineno}: negative frame index")
        if (label, frame) in seen:
            raise ManifestError(f"line {lineno}: duplicate frame {frame} for label {label!r}")
        seen.add((label, frame))
        if label not in labels:
            labels.append(label)
        rows.append(ManifestRow(mesh, tex or None, label, frame))
    if len({r.texture is None for r in rows}) > 1:
        raise ManifestError("either every row has a texture path or none does")
    rows.sort(key=lambda r: (r.label, r.frame))
    return SequenceManifest(tuple(rows), tuple(labels), base_dir)


def read_manifest(path):
    with open(path, "rb") as fh:
        return load_manifest(fh.read(), os.path.dirname(os.path.abspath(path)))


def write_manifest(rows):
    out = [",".join(MANIFEST_HEADER)]
    out += [f"{r.mesh},{r.texture or ''},{r.label},{r.frame}" for r in rows]
    return ("\n".join(out) + "\n").encode("utf-8")


def load_sequence(manifest):
    """Read every frame a manifest points to, enforcing constant topology."""
    meshes, textures = [], []
    ref = None
    for row in manifest.rows:
        path = manifest.resolve(row.mesh)
        with open(path, "rb") as fh:
            try:
                m = parse_obj(fh.read(), row.frame)
            except ParseError as exc:
                raise type(exc)(f"{path}: {exc}") from None
        if ref is None:
            ref = m
        elif not m.same_topology(ref):
            raise TopologyError(f"{path}: topology differs from {manifest.rows[0].mesh} "
                                f"({m.vertex_count} vs {ref.vertex_count} vertices)")
        meshes.append(m)
        if row.texture is not None:
            tpath = manifest.resolve(row.texture)
            with open(tpath, "rb") as fh:
                try:
                    t = load_texture_ppm(fh.read())
                except FormatError as exc:
                    raise FormatError(f"{tpath}: {exc}") from None
            if textures and t.pixels.shape != textures[0].pixels.shape:
                raise FormatError(f"{tpath}: texture size differs within the sequence")
            textures.append(t)
    return meshes, (textures or None)
