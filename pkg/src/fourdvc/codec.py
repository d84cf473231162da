"""The "4DVC" latent container, sequence encode/decode, size accounting and
decode-latency benchmarking.

Container layout, all integers little-endian, floats IEEE-754:

header section
    magic ``4DVC``, u16 version, u16 flags (bit0 texture, bit1 conditioned),
    u32 latent_size, u32 frame_count, u32 vertex_count, u32 face_count,
    u32 texture height, u32 texture width (0 when absent), u32 label_count,
    per label u16 length + UTF-8 bytes, mesh NormalizationSpec, texture
    NormalizationSpec (when flagged), u32 model fingerprint, faces as
    face_count * 3 u32, then u32 CRC32 of the section.
NormalizationSpec
    u8 kind, u32 features, f64 a, f64 b, then mean, std, min, max as
    ``features`` f64 each.
frame section
    u32 byte length, then per frame u32 frame_index, u16 label id (only when
    conditioned), latent_size f32 (the posterior mean), then u32 CRC32 of the
    records.
"""

import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import normalize as nz
from .asset_io import MeshFrame, TextureFrame
from .errors import ConditioningError, ContainerError, FingerprintError, TopologyError
from .rng import XorShift64Star
from .vae import check_range

MAGIC = b"4DVC"
VERSION = 1
_KINDS = ("mean_subtract", "zscore", "minmax")
_FLAG_TEXTURE = 1
_FLAG_LABELS = 2


@dataclass(eq=False)
class EncodedSequence:
    latent_size: int
    vertex_count: int
    faces: np.ndarray
    mesh_spec: nz.NormalizationSpec
    fingerprint: int
    frame_indices: np.ndarray
    latents: np.ndarray  # (frames, L) float32
    texture_shape: tuple | None = None
    texture_spec: nz.NormalizationSpec | None = None
    label_names: tuple = ()
    label_ids: np.ndarray | None = None
    version: int = VERSION

    @property
    def frame_count(self):
        return len(self.latents)

    @property
    def conditioned(self):
        return self.label_ids is not None

    def to_bytes(self):
        return write_container(self)


# ---------------------------------------------------------------- serialization

def _pack_spec(spec):
    n = spec.features
    out = struct.pack("<BIdd", _KINDS.index(spec.kind), n, *spec.target)
    for arr in (spec.mean, spec.std, spec.data_min, spec.data_max):
        out += np.asarray(arr, dtype="<f8").tobytes()
    return out


class _Reader:
    def __init__(self, buf, off=0, end=None):
        self.buf, self.off = buf, off
        self.end = len(buf) if end is None else end

    def take(self, n):
        if n < 0 or self.off + n > self.end:
            raise ContainerError(f"container truncated at byte {self.off} (needed {n} more)")
        b = self.buf[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def _read_spec(r):
    kind, n, a, b = r.unpack("<BIdd")
    if kind >= len(_KINDS):
        raise ContainerError(f"unknown normalization kind {kind}")
    arrs = [r.array("<f8", n) for _ in range(4)]
    try:
        return nz.NormalizationSpec(_KINDS[kind], *arrs, (a, b))
    except Exception as exc:
        raise ContainerError(f"invalid normalization spec: {exc}") from None


def write_container(seq):
    flags = (_FLAG_TEXTURE if seq.texture_shape else 0) | (_FLAG_LABELS if seq.conditioned else 0)
    h, w = seq.texture_shape or (0, 0)
    faces = np.asarray(seq.faces, dtype="<u4").reshape(-1, 3)
    head = [MAGIC, struct.pack("<HHIIIIIII", seq.version, flags, seq.latent_size, seq.frame_count,
                               seq.vertex_count, len(faces), h, w, len(seq.label_names))]
    for name in seq.label_names:
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
    head.append(_pack_spec(seq.mesh_spec))
    if seq.texture_shape:
        head.append(_pack_spec(seq.texture_spec))
    head.append(struct.pack("<I", seq.fingerprint))
    head.append(faces.tobytes())
    header = b"".join(head)
    header += struct.pack("<I", zlib.crc32(header))

    lat = np.asarray(seq.latents, dtype="<f4")
    if lat.shape != (seq.frame_count, seq.latent_size):
        raise ContainerError("latent array does not match header dimensions")
    rec = [struct.pack("<I", int(i)) for i in seq.frame_indices]
    if seq.conditioned:
        rec = [r + struct.pack("<H", int(c)) for r, c in zip(rec, seq.label_ids)]
    body = b"".join(r + z.tobytes() for r, z in zip(rec, lat))
    frames = struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))
    return header + frames


def read_container(blob):
    blob = bytes(blob)
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise ContainerError("not a 4DVC container")
    version, flags, L, count, n_vert, n_faces, h, w, n_labels = r.unpack("<HHIIIIIII")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    names = []
    for _ in range(n_labels):
        (ln,) = r.unpack("<H")
        try:
            names.append(r.take(ln).decode("utf-8"))
        except UnicodeDecodeError:
            raise ContainerError("label table is not UTF-8") from None
    mesh_spec = _read_spec(r)
    tex_spec = _read_spec(r) if flags & _FLAG_TEXTURE else None
    (fingerprint,) = r.unpack("<I")
    faces = r.array("<u4", 3 * n_faces).reshape(-1, 3).astype(np.int64)
    header_end = r.off
    (crc,) = r.unpack("<I")
    if zlib.crc32(blob[:header_end]) != crc:
        raise ContainerError("header CRC mismatch")
    (body_len,) = r.unpack("<I")
    cond = bool(flags & _FLAG_LABELS)
    rec_size = 4 + (2 if cond else 0) + 4 * L
    if body_len != rec_size * count:
        raise ContainerError(f"frame section is {body_len} bytes, expected {rec_size * count}")
    body = r.take(body_len)
    (crc,) = r.unpack("<I")
    if zlib.crc32(body) != crc:
        raise ContainerError("frame section CRC mismatch")
    if r.off != len(blob):
        raise ContainerError(f"{len(blob) - r.off} trailing bytes after frame section")
    fields = [("index", "<u4")] + ([("label", "<u2")] if cond else []) + [("z", "<f4", (L,))]
    recs = np.frombuffer(body, dtype=np.dtype(fields), count=count)
    return EncodedSequence(
        latent_size=L, vertex_count=n_vert, faces=faces, mesh_spec=mesh_spec,
        fingerprint=fingerprint, frame_indices=recs["index"].astype(np.int64),
        latents=np.ascontiguousarray(recs["z"], dtype=np.float32).reshape(count, L),
        texture_shape=(h, w) if flags & _FLAG_TEXTURE else None, texture_spec=tex_spec,
        label_names=tuple(names), label_ids=recs["label"].astype(np.int64) if cond else None,
        version=version)


# ---------------------------------------------------------------- encode / decode

def encode_sequence(model, frames, mesh_spec, textures=None, texture_spec=None, labels=None,
                    fingerprint=None, chunk=64):
    """Encode frames into an :class:`EncodedSequence` holding each frame's posterior mean.

    ``labels`` are label ids (ints) or names from ``model.config.label_names``.
    """
    cfg = model.config
    if not frames:
        raise TopologyError("no frames to encode")
    ref = frames[0]
    for f in frames[1:]:
        if not f.same_topology(ref):
            raise TopologyError(f"frame {f.frame_index}: topology differs from frame {ref.frame_index}")
    if 3 * ref.vertex_count != cfg.mesh_input_size:
        raise TopologyError(f"model expects {cfg.mesh_input_size // 3} vertices, frames have {ref.vertex_count}")
    check_range(cfg, mesh_spec)
    if cfg.conditioned != (labels is not None):
        raise ConditioningError("labels must be given exactly when the model is conditioned")
    if bool(cfg.texture_size) != (textures is not None):
        raise ConditioningError("textures must be given exactly when the model has a texture branch")
    ids = None
    if labels is not None:
        ids = np.array([cfg.label_names.index(x) if isinstance(x, str) else int(x) for x in labels])
        if len(ids) != len(frames):
            raise ConditioningError("need one label per frame")
    mesh = nz.apply(mesh_spec, np.stack([nz.flatten_mesh(f) for f in frames]))
    tex = None
    if textures is not None:
        check_range(cfg, texture_spec)
        tex = nz.apply(texture_spec, np.stack([t.pixels for t in textures]))
    mus = []
    for s in range(0, len(frames), chunk):
        sl = slice(s, s + chunk)
        mu, _ = model.encode(mesh[sl], None if tex is None else tex[sl], None if ids is None else ids[sl])
        mus.append(mu)
    return EncodedSequence(
        latent_size=cfg.latent_size, vertex_count=ref.vertex_count, faces=ref.faces,
        mesh_spec=mesh_spec, fingerprint=model.fingerprint() if fingerprint is None else fingerprint,
        frame_indices=np.array([f.frame_index for f in frames]),
        latents=np.concatenate(mus).astype(np.float32),
        texture_shape=(cfg.texture_size, cfg.texture_size) if tex is not None else None,
        texture_spec=texture_spec, label_names=tuple(cfg.label_names) if ids is not None else (),
        label_ids=ids)


def decode_latents(model, z, seq_like, labels=None):
    """Decode a batch of latents and return data-space (mesh (B, N, 3), texture (B, H, W, 3) | None)."""
    mo, to = model.decode(z, labels)
    mesh = nz.invert(seq_like.mesh_spec, mo).reshape(len(mo), -1, 3)
    tex = nz.invert(seq_like.texture_spec, to) if to is not None else None
    return mesh, tex


def decode_sequence(model, encoded, fingerprint=None, chunk=64):
    """Decode every frame; returns (meshes, textures or None)."""
    fp = model.fingerprint() if fingerprint is None else fingerprint
    if fp != encoded.fingerprint:
        raise FingerprintError(f"container was encoded with model {encoded.fingerprint:08x}, "
                               f"got model {fp:08x}")
    if encoded.latent_size != model.config.latent_size:
        raise FingerprintError("latent size differs from the model")
    meshes, textures = [], []
    for s in range(0, encoded.frame_count, chunk):
        sl = slice(s, s + chunk)
        ids = encoded.label_ids[sl] if encoded.conditioned else None
        mesh, tex = decode_latents(model, encoded.latents[sl], encoded, ids)
        for k, v in enumerate(mesh):
            meshes.append(MeshFrame(v, encoded.faces, int(encoded.frame_indices[s + k])))
        if tex is not None:
            lo = min(encoded.texture_spec.data_min)
            hi = max(encoded.texture_spec.data_max)
            textures += [TextureFrame(np.clip(t, lo, hi), (lo, hi)) for t in tex]
    return meshes, (textures or None)


# ---------------------------------------------------------------- accounting

@dataclass(frozen=True)
class CompressionStats:
    raw_floats_per_frame: int
    encoded_floats_per_frame: int
    ratio: float
    raw_bytes: int
    encoded_bytes: float  # per frame, header amortized over frame_count


def header_size(vertex_count, face_count=0, texture=False, label_names=()):
    spec = 1 + 4 + 16 + 4 * 8 * (3 * vertex_count)
    tex = (1 + 4 + 16 + 4 * 8 * 3) if texture else 0
    labels = sum(2 + len(n.encode("utf-8")) for n in label_names)
    return 4 + 2 + 2 + 7 * 4 + labels + spec + tex + 4 + 12 * face_count + 4


def compression_stats(vertex_count, latent_size, texture_size=None, frame_count=1, face_count=0,
                      conditioned=False):
    """Per-frame size accounting: raw = 3N (+ 3HW), encoded = L, ratio = L / raw."""
    if texture_size is None:
        hw = 0
    elif isinstance(texture_size, int):
        hw = texture_size * texture_size
    else:
        hw = texture_size[0] * texture_size[1]
    raw = 3 * vertex_count + 3 * hw
    record = 4 + (2 if conditioned else 0) + 4 * latent_size
    overhead = header_size(vertex_count, face_count, bool(hw)) + 8
    return CompressionStats(
        raw_floats_per_frame=raw, encoded_floats_per_frame=latent_size,
        ratio=latent_size / raw, raw_bytes=4 * raw,
        encoded_bytes=record + overhead / frame_count)


# ---------------------------------------------------------------- latency

@dataclass(frozen=True)
class BenchResult:
    mean_s: float
    p99_s: float
    hz: float
    samples: np.ndarray

    def record(self):
        return f"{self.mean_s:.9f},{self.p99_s:.9f},{self.hz:.3f}"


BENCH_HEADER = "mean_s,p99_s,hz"


def bench_decode(model, trials=1000, warmup=10, seed=0, mesh_spec=None, texture_spec=None):
    """Wall-clock single-frame decode latency, including denormalization and
    materializing the (N, 3) vertex buffer."""
    cfg = model.config
    rng = XorShift64Star(seed)
    L = cfg.latent_size
    z = rng.normals((trials + warmup, L), model.dtype)
    labels = None
    if cfg.conditioned:
        labels = [rng.randbelow(cfg.label_count) for _ in range(trials + warmup)]
    if mesh_spec is None and cfg.mesh_input_size:
        m = cfg.mesh_input_size
        mesh_spec = nz.NormalizationSpec("minmax", np.zeros(m), np.ones(m), -np.ones(m), np.ones(m),
                                         cfg.target_range)
    if texture_spec is None and cfg.texture_size:
        texture_spec = nz.NormalizationSpec("minmax", np.zeros(3), np.ones(3), np.zeros(3),
                                            np.full(3, 255.0), cfg.target_range)
    times = np.empty(trials)
    clock = time.perf_counter
    for i in range(trials + warmup):
        lab = None if labels is None else labels[i:i + 1]
        t0 = clock()
        mo, to = model.decode(z[i:i + 1], lab)
        if mo is not None:
            verts = np.ascontiguousarray(nz.invert(mesh_spec, mo[0]).reshape(-1, 3))
        if to is not None:
            pixels = np.ascontiguousarray(nz.invert(texture_spec, to[0]))
        dt = clock() - t0
        if i >= warmup:
            times[i - warmup] = dt
    mean = float(times.mean())
    return BenchResult(mean, float(np.percentile(times, 99)), 1.0 / mean, times)
