"""Deterministic stand-in corpus of deforming mesh (+ texture) sequences.

Each class is a triangle ribbon with its own static shape offset and its own
deformation mode; frames sweep one period of that motion.  The class offsets
dominate the motion amplitude, so classes separate linearly in PCA space.
"""

import os

import numpy as np

from .asset_io import ManifestRow, MeshFrame, TextureFrame, write_manifest, write_obj, write_ppm
from .errors import ConfigError

ACTION_LABELS = ("downstairs", "jump", "jumpforward", "kick", "left", "leftsharp", "low",
                 "push", "right", "rightsharp", "run", "upstairs", "walk")


def class_names(count):
    if count <= len(ACTION_LABELS):
        return list(ACTION_LABELS[:count])
    return [f"class{i:02d}" for i in range(count)]


def ribbon_faces(n):
    faces = [(k, k + 1, k + 2) if k % 2 == 0 else (k + 1, k, k + 2) for k in range(n - 2)]
    return np.array(faces, dtype=np.int64).reshape(-1, 3)


def _class_params(rng, classes):
    return [dict(offset=rng.uniform(-1.0, 1.0, 3),
                 bend=rng.uniform(-0.8, 0.8),
                 scale=rng.uniform(0.8, 1.2),
                 freq=rng.uniform(0.5, 2.0),
                 amp=rng.uniform(0.08, 0.2),
                 phase=rng.uniform(0, 2 * np.pi, 3),
                 hue=rng.uniform(40, 215, 3),
                 stripes=int(rng.integers(1, 4)))
            for _ in range(classes)]


def mesh_vertices(p, n, t):
    """Vertex positions of one class at normalized time t in [0, 1)."""
    k = np.arange(n)
    cols = (n + 1) // 2
    u = (k // 2) / max(cols - 1, 1)
    row = k % 2
    w = 2 * np.pi * (p["freq"] * u + t)
    x = p["scale"] * (2 * u - 1) + 0.5 * p["amp"] * np.sin(w + p["phase"][0])
    y = 0.4 * row - 0.2 + p["amp"] * np.cos(w + p["phase"][1] + row)
    z = p["bend"] * (u - 0.5) ** 2 + p["amp"] * np.sin(w + p["phase"][2])
    return np.stack([x, y, z], 1) + p["offset"]


def texture_pixels(p, size, t):
    j = np.arange(size)[None, :, None]
    i = np.arange(size)[:, None, None]
    wave = np.sin(2 * np.pi * (p["stripes"] * (j + 0.5 * i) / size + t) + p["phase"][None, None, :])
    px = p["hue"][None, None, :] + 40.0 * wave
    return np.clip(np.rint(px), 0, 255)


def synthetic_sequences(classes=3, frames=20, vertices=50, texture=0, seed=0):
    """In-memory corpus: (meshes, textures or None, labels, label_names)."""
    if vertices < 4:
        raise ConfigError("synthetic meshes need at least 4 vertices")
    if classes < 1 or frames < 1:
        raise ConfigError("need at least one class and one frame")
    rng = np.random.default_rng(seed)
    params = _class_params(rng, classes)
    names = class_names(classes)
    faces = ribbon_faces(vertices)
    meshes, textures, labels = [], [], []
    for c, p in enumerate(params):
        for f in range(frames):
            t = f / frames
            meshes.append(MeshFrame(mesh_vertices(p, vertices, t), faces, f))
            if texture:
                textures.append(TextureFrame(texture_pixels(p, texture, t)))
            labels.append(c)
    return meshes, (textures or None), np.array(labels), names


def make_synthetic_dataset(out_dir, classes=3, frames=20, vertices=50, texture=16, seed=0):
    """Write OBJ (+ PPM) files and ``manifest.csv`` under ``out_dir``; returns the manifest path."""
    meshes, textures, labels, names = synthetic_sequences(classes, frames, vertices, texture, seed)
    os.makedirs(os.path.join(out_dir, "meshes"), exist_ok=True)
    if textures:
        os.makedirs(os.path.join(out_dir, "textures"), exist_ok=True)
    rows = []
    for i, (m, lab) in enumerate(zip(meshes, labels)):
        stem = f"{names[lab]}_{m.frame_index:04d}"
        mpath = f"meshes/{stem}.obj"
        with open(os.path.join(out_dir, mpath), "wb") as fh:
            fh.write(write_obj(m))
        tpath = None
        if textures:
            tpath = f"textures/{stem}.ppm"
            with open(os.path.join(out_dir, tpath), "wb") as fh:
                fh.write(write_ppm(textures[i]))
        rows.append(ManifestRow(mpath, tpath, names[lab], m.frame_index))
    path = os.path.join(out_dir, "manifest.csv")
    with open(path, "wb") as fh:
        fh.write(write_manifest(rows))
    return path
