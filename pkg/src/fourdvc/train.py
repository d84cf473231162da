"""Losses, Adam, stratified splitting and the mini-batch training loop."""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .asset_io import SequenceManifest
from .errors import ConfigError, NumericalError, ShapeError, SplitError, UsageError
from .rng import XorShift64Star

log = logging.getLogger(__name__)

REPORT_HEADER = "epoch,train_err,test_err,kl,total,seconds"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    batch_size: int = 16
    beta: float = 1e-3
    seed: int = 0
    split_fraction: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split_fraction must lie in (0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")


@dataclass
class Dataset:
    """Normalized training tensors: mesh (n, M), texture (n, H, W, 3), label ids (n,)."""

    mesh: np.ndarray | None = None
    texture: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.mesh if self.mesh is not None else self.texture)

    def subset(self, idx):
        def pick(a):
            return None if a is None else a[idx]
        return Dataset(pick(self.mesh), pick(self.texture), pick(self.labels))


@dataclass
class EpochStats:
    epoch: int
    train_err: float
    test_err: float
    kl: float
    total: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)

    def to_csv(self):
        lines = [REPORT_HEADER]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_err!r},{e.test_err!r},{e.kl!r},{e.total!r},{e.seconds:.6f}")
        return "\n".join(lines) + "\n"

    @property
    def train_errors(self):
        return [e.train_err for e in self.epochs]

    @property
    def test_errors(self):
        return [e.test_err for e in self.epochs]


# ---------------------------------------------------------------- losses

def mse(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"mse operands differ in shape: {y.shape} vs {y_hat.shape}")
    d = y - y_hat
    return float(np.mean(d * d))


def kl_divergence(mu, log_var):
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over latents, averaged over a batch."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    per = -0.5 * np.sum(1.0 + log_var - mu * mu - np.exp(log_var), axis=-1)
    # each term 1 + t - e^t is <= 0, clamp only guards against rounding below zero
    return float(max(np.mean(per), 0.0))


def total_loss(mesh_pair=None, texture_pair=None, mu=None, log_var=None, beta=1e-3):
    """MSE(texture) + MSE(mesh) + beta * KL; an absent modality contributes 0.

    Returns (total, components) where components holds ``mse_mesh``,
    ``mse_texture``, ``kl`` and ``beta_kl``.
    """
    if mesh_pair is None and texture_pair is None:
        raise UsageError("total_loss needs at least one modality")
    m = mse(*mesh_pair) if mesh_pair is not None else 0.0
    t = mse(*texture_pair) if texture_pair is not None else 0.0
    kl = kl_divergence(mu, log_var) if mu is not None else 0.0
    comps = {"mse_mesh": m, "mse_texture": t, "kl": kl, "beta_kl": beta * kl}
    return m + t + beta * kl, comps


def loss_gradients(mesh_pair, texture_pair, mu, log_var, beta):
    """Gradients of :func:`total_loss` w.r.t. the reconstructions, mu and log_var."""
    g_mesh = g_tex = None
    if mesh_pair is not None:
        y, y_hat = mesh_pair
        g_mesh = (2.0 / y.size) * (y_hat - y)
    if texture_pair is not None:
        y, y_hat = texture_pair
        g_tex = (2.0 / y.size) * (y_hat - y)
    b = mu.shape[0] if mu.ndim == 2 else 1
    g_mu = (beta / b) * mu
    g_lv = (beta / b) * 0.5 * (np.exp(log_var) - 1.0)
    return g_mesh, g_tex, g_mu, g_lv


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params`` (name -> array)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------- split

def split_indices(labels, fraction, seed):
    """Stratified split of sample indices; every class keeps >= 1 train and test sample."""
    labels = list(labels)
    rng = XorShift64Star(seed)
    classes = {}
    for i, lab in enumerate(labels):
        classes.setdefault(lab, []).append(i)
    train, test = [], []
    for lab, idx in classes.items():
        if len(idx) < 2:
            raise SplitError(f"class {lab!r} has {len(idx)} sample; need >= 2 to split")
        order = [idx[j] for j in rng.permutation(len(idx))]
        k = min(max(int(round(fraction * len(idx))), 1), len(idx) - 1)
        train += order[:k]
        test += order[k:]
    return sorted(train), sorted(test)


def split(manifest, fraction=0.9, seed=0):
    tr, te = split_indices([r.label for r in manifest.rows], fraction, seed)
    mk = lambda ix: SequenceManifest(tuple(manifest.rows[i] for i in ix), manifest.label_set, manifest.base_dir)
    return mk(tr), mk(te)


# ---------------------------------------------------------------- loop

def batches(n, batch_size, order):
    """Index batches over ``order``; a trailing singleton joins the previous batch."""
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def reconstruction_error(model, data, chunk=64):
    """Mean per-sample MSE with eval-mode batch norm and z = mu."""
    if data is None or len(data) == 0:
        return float("nan")
    total, n = 0.0, len(data)
    for s in range(0, n, chunk):
        d = data.subset(slice(s, s + chunk))
        lab = d.labels if model.config.conditioned else None
        mu, _ = model.encode(d.mesh, d.texture, lab)
        mo, to = model.decode(mu, lab)
        err = 0.0
        if mo is not None:
            err += np.mean((mo.astype(np.float64) - d.mesh) ** 2, axis=1)
        if to is not None:
            err += np.mean((to.astype(np.float64) - d.texture) ** 2, axis=(1, 2, 3))
        total += float(np.sum(err))
    return total / n


def _save_atomic(path, blob):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def fit(model, train_data, config, test_data=None, checkpoint_path=None, checkpoint_every=0,
        on_epoch=None):
    """Mini-batch training with Adam on MSE + beta * KL.

    Per epoch the report holds the batch-averaged training reconstruction
    error, the eval-mode test reconstruction error, the batch-averaged KL term
    and total loss.  A NumericalError aborts training; the checkpoint on disk
    is then the last one written before the failure.
    """
    n = len(train_data)
    if n < 2:
        raise ConfigError("need at least 2 training samples")
    cond = model.config.conditioned
    if cond and train_data.labels is None:
        raise ConfigError("conditioned model needs labelled training data")
    rng = XorShift64Star(config.seed)
    state = AdamState()
    params = model.parameters()
    report = TrainReport()
    L = model.config.latent_size
    dt = model.dtype
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for idx in batches(n, config.batch_size, order):
            b = train_data.subset(idx)
            mesh = None if b.mesh is None else b.mesh.astype(dt)
            tex = None if b.texture is None else b.texture.astype(dt)
            eps = rng.normals((len(idx), L), dt)
            model.zero_grad()
            mo, to, mu, lv = model.forward_train(mesh, tex, b.labels if cond else None, eps)
            mp = None if mo is None else (mesh, mo)
            tp = None if to is None else (tex, to)
            total, comps = total_loss(mp, tp, mu, lv, config.beta)
            if not np.isfinite(total):
                raise NumericalError(f"epoch {epoch}: loss became {total}")
            model.backward(*loss_gradients(mp, tp, mu, lv, config.beta))
            adam_step(params, model.gradients(), state, config.learning_rate)
            sums += (comps["mse_mesh"] + comps["mse_texture"], comps["kl"], total)
            steps += 1
        avg = sums / steps
        test_err = reconstruction_error(model, test_data) if test_data is not None else float("nan")
        stats = EpochStats(epoch, float(avg[0]), test_err, float(avg[1]), float(avg[2]),
                           time.perf_counter() - t0)
        report.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if checkpoint_path and checkpoint_every and epoch % checkpoint_every == 0:
            _save_atomic(checkpoint_path, model.to_checkpoint())
    if checkpoint_path:
        _save_atomic(checkpoint_path, model.to_checkpoint())
    return report
