"""Per-feature preprocessing transforms and their exact inverses."""

from dataclasses import dataclass

import numpy as np

from .asset_io import MeshFrame
from .errors import DegenerateFeatureError, UsageError

KINDS = ("mean_subtract", "zscore", "minmax")


@dataclass(frozen=True, eq=False)
class NormalizationSpec:
    kind: str
    mean: np.ndarray
    std: np.ndarray
    data_min: np.ndarray
    data_max: np.ndarray
    target: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown normalization kind {self.kind!r}")
        a, b = self.target
        if not b > a:
            raise UsageError("target range needs b > a")
        for name in ("mean", "std", "data_min", "data_max"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "target", (float(a), float(b)))

    @property
    def features(self):
        return len(self.mean)

    def __eq__(self, other):
        if not isinstance(other, NormalizationSpec):
            return NotImplemented
        return (self.kind == other.kind and self.target == other.target
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("mean", "std", "data_min", "data_max")))

    def to_dict(self):
        return {"kind": self.kind, "target": list(self.target),
                "mean": self.mean.tolist(), "std": self.std.tolist(),
                "data_min": self.data_min.tolist(), "data_max": self.data_max.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["mean"], d["std"], d["data_min"], d["data_max"], tuple(d["target"]))


def fit(kind, dataset, target=(-1.0, 1.0)):
    """Fit per-feature statistics on a (samples, features) matrix.

    Standard deviation is the population one.  Features that are constant over
    the fitting set cannot be scaled and raise ``DegenerateFeatureError``.
    """
    x = np.asarray(dataset, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise UsageError("fit needs a (samples >= 2, features) matrix")
    if not np.all(np.isfinite(x)):
        raise UsageError("fit data must be finite")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    lo, hi = x.min(axis=0), x.max(axis=0)
    # max <= min is exact; std of a constant column can round to a tiny nonzero value,
    # and std of a tiny spread can underflow to 0
    if kind == "zscore":
        bad = np.flatnonzero((hi <= lo) | (std <= 0))
    elif kind == "minmax":
        bad = np.flatnonzero(hi <= lo)
    else:
        bad = ()
    if len(bad):
        raise DegenerateFeatureError(int(bad[0]))
    return NormalizationSpec(kind, mean, std, lo, hi, target)


def apply(spec, x):
    """Map data-space values (``..., features``) into model space.

    Values outside the fit range extrapolate linearly; nothing is clamped.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "mean_subtract":
        return x - spec.mean
    if spec.kind == "zscore":
        return (x - spec.mean) / spec.std
    a, b = spec.target
    return a + (b - a) * ((x - spec.data_min) / (spec.data_max - spec.data_min))


def invert(spec, y):
    y = np.asarray(y, dtype=np.float64)
    if spec.kind == "mean_subtract":
        return y + spec.mean
    if spec.kind == "zscore":
        return y * spec.std + spec.mean
    a, b = spec.target
    return spec.data_min + ((y - a) / (b - a)) * (spec.data_max - spec.data_min)


def flatten_mesh(frame):
    return np.asarray(frame.vertices, dtype=np.float64).reshape(-1)


def unflatten_mesh(vec, faces, frame_index=0):
    return MeshFrame(np.asarray(vec, dtype=np.float64).reshape(-1, 3), faces, frame_index)


def texture_features(pixels):
    """View textures (..., H, W, 3) as per-channel samples for fitting."""
    return np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
