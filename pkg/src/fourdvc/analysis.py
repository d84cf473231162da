"""PCA of frame datasets and latent-space sequence generation."""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import XorShift64Star

PCA_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, features), orthonormal rows
    eigenvalues: np.ndarray
    explained: np.ndarray  # fraction of total variance per component

    @property
    def k(self):
        return len(self.components)


def _power_deflation(apply, dim, k, tol, max_iter):
    """Top-k eigenpairs of a symmetric PSD operator by power iteration with
    Gram-Schmidt deflation against already-found vectors."""
    vecs, vals = [], []
    start = np.random.default_rng(0)
    for _ in range(k):
        v = start.standard_normal(dim)
        for u in vecs:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = apply(v)
            for u in vecs:
                w -= (u @ w) * u
            nrm = np.linalg.norm(w)
            if nrm == 0.0:
                break  # v spans the null space; eigenvalue 0
            w /= nrm
            # the step length bounds the angle itself; 1 - |cos| would only bound its square
            converged = np.linalg.norm(w - np.copysign(1.0, v @ w) * v) < tol
            v = w
            if converged:
                break
        else:
            warnings.warn("power iteration did not reach tolerance; eigenvalues are close", RuntimeWarning)
        # re-orthogonalize once more against rounding drift
        for u in vecs:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        vecs.append(v)
        vals.append(max(float(v @ apply(v)), 0.0))
    return np.array(vecs), np.array(vals)


def pca_fit(data, k, tol=PCA_TOL, max_iter=20000):
    """Top-k principal components of the sample covariance.

    With fewer samples than features the eigenvectors are found on the Gram
    matrix of the centered data and mapped back, which gives the same
    components.  Each component's largest-magnitude entry is made positive.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError("pca needs a (samples >= 2, features) matrix")
    n, d = x.shape
    if not 1 <= k <= min(n - 1, d):
        raise ConfigError(f"k={k} must lie in [1, {min(n - 1, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    if n < d:
        gram = xc @ xc.T / (n - 1)
        u, vals = _power_deflation(lambda v: gram @ v, n, k, tol, max_iter)
        comps = u @ xc
        comps /= np.linalg.norm(comps, axis=1, keepdims=True)
        total = float(np.trace(gram))
    else:
        cov = xc.T @ xc / (n - 1)
        comps, vals = _power_deflation(lambda v: cov @ v, d, k, tol, max_iter)
        total = float(np.trace(cov))
    order = np.argsort(-vals, kind="stable")
    comps, vals = comps[order], vals[order]
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    explained = vals / total if total > 0 else np.zeros_like(vals)
    return PcaModel(mean, comps, vals, explained)


def pca_project(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(model.mean):
        raise ShapeError(f"expected {len(model.mean)} features, got {x.shape[-1]}")
    return (x - model.mean) @ model.components.T


def pca_reconstruct(model, y):
    return np.asarray(y, dtype=np.float64) @ model.components + model.mean


def projection_csv(labels, coords):
    """``label,pc1,pc2`` export of a 2-D projection."""
    lines = ["label,pc1,pc2"]
    lines += [f"{lab},{float(c[0])!r},{float(c[1])!r}" for lab, c in zip(labels, coords)]
    return "\n".join(lines) + "\n"


def sample_latents(count, latent_size, seed=0):
    """``count`` i.i.d. N(0, I) latent vectors from the seeded xorshift stream."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    return XorShift64Star(seed).normals((count, latent_size))


def interpolate_latents(model, z_a, z_b, steps, label=None):
    """Decode z_t = (1 - t) z_a + t z_b for t = i / (steps - 1).

    Each step is decoded on its own so the endpoints are bit-identical to
    ``model.decode(z_a)`` and ``model.decode(z_b)``.  Returns a list of
    (mesh (M,) or None, texture (H, W, 3) or None) in model output space.
    """
    if steps < 2:
        raise ConfigError("steps must be >= 2")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    L = model.config.latent_size
    if z_a.shape != (L,) or z_b.shape != (L,):
        raise ShapeError(f"latents must have length {L}")
    frames = []
    delta = z_b - z_a
    for i in range(steps):
        # z_a + t * delta keeps equal endpoints bit-identical; the last step is pinned to z_b
        z = z_b if i == steps - 1 else z_a + (i / (steps - 1)) * delta
        mo, to = model.decode(z[None], None if label is None else [label])
        frames.append((None if mo is None else mo[0], None if to is None else to[0]))
    return frames
