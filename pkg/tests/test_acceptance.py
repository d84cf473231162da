"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS n: ...`` or ``FAIL n: ...`` line (also
collected into the pytest terminal summary) and then asserts.  Run with
``pytest tests/test_acceptance.py -s`` to see the lines inline.
"""

import math
import threading
import time

import numpy as np
import pytest

from fourdvc import normalize as nz
from fourdvc.analysis import pca_fit, pca_project, pca_reconstruct
from fourdvc.codec import (bench_decode, compression_stats, decode_sequence, encode_sequence,
                           read_container, write_container)
from fourdvc.errors import ContainerError
from fourdvc.player import FrameSource, ListSource, PlaybackConfig, play
from fourdvc.synthetic import synthetic_sequences
from fourdvc.train import (Dataset, TrainConfig, fit, kl_divergence, reconstruction_error, split_indices,
                           total_loss)
from fourdvc.vae import ModelConfig, build_mesh_vae, build_model, build_texture_vae

from gradcheck_util import EPS, LAYER_KINDS, SHAPES_PER_LAYER, TOL, cases, layer_worst_error

# ---------------------------------------------------------------- 1

TEXTURE_TABLE_ENCODER = [
    ("Conv1", (1024, 1024, 3), (512, 512, 16)),
    ("MaxPool1", (512, 512, 16), (256, 256, 16)),
    ("Conv2", (256, 256, 16), (128, 128, 32)),
    ("MaxPool2", (128, 128, 32), (64, 64, 32)),
    ("Conv3", (64, 64, 32), (32, 32, 64)),
    ("MaxPool3", (32, 32, 64), (16, 16, 64)),
    ("Conv4", (16, 16, 64), (8, 8, 128)),
    ("MaxPool4", (8, 8, 128), (4, 4, 128)),
    ("Linear1", (4, 4, 128), (1024,)),
    ("Linear2", (1024,), (512,)),
    ("Linear3", (512,), (256,)),
]
TEXTURE_TABLE_DECODER = [
    ("Linear3", (256,), (512,)),
    ("Linear2", (512,), (1024,)),
    ("Linear1", (1024,), (2048,)),
    ("TransConv1", (4, 4, 128), (8, 8, 128)),
    ("TransConv2", (8, 8, 128), (16, 16, 64)),
    ("TransConv3", (16, 16, 64), (32, 32, 64)),
    ("TransConv4", (32, 32, 64), (64, 64, 32)),
    ("TransConv5", (64, 64, 32), (128, 128, 32)),
    ("TransConv6", (128, 128, 32), (256, 256, 16)),
    ("TransConv7", (256, 256, 16), (512, 512, 16)),
    ("TransConv8", (512, 512, 16), (1024, 1024, 3)),
]


def test_01_texture_shape_table(verdict):
    t0 = time.perf_counter()
    model = build_texture_vae(ModelConfig(latent_size=128, texture_size=1024))
    enc, dec = model.layer_table()
    secs = time.perf_counter() - t0
    ok = enc == TEXTURE_TABLE_ENCODER and dec == TEXTURE_TABLE_DECODER and secs < 1.0
    verdict(1, "texture VAE shape table at 1024x1024x3", ok,
            f"{len(enc)} encoder + {len(dec)} decoder rows, exact={enc == TEXTURE_TABLE_ENCODER and dec == TEXTURE_TABLE_DECODER}, {secs:.3f}s (< 1s)")


# ---------------------------------------------------------------- 2

def test_02_gradient_checks(verdict):
    t0 = time.perf_counter()
    worst, counts = {}, {}
    for kind in LAYER_KINDS:
        cs = cases(kind)
        counts[kind] = len(cs)
        worst[kind] = max(layer_worst_error(layer, x, training, seed=i) for i, (layer, x, training) in enumerate(cs))
        assert all(x.dtype == np.float64 for _, x, _ in cs)
    secs = time.perf_counter() - t0
    ok = all(w < TOL for w in worst.values()) and min(counts.values()) >= SHAPES_PER_LAYER and secs < 120
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    verdict(2, f"gradient checks (eps={EPS}, float64, {min(counts.values())} shapes/layer)", ok,
            f"max rel err {detail}; tol {TOL}; {secs:.1f}s (< 120s)")


# ---------------------------------------------------------------- 3

def _overfit_run(seed):
    meshes, _, labels, _ = synthetic_sequences(classes=1, frames=8, vertices=50, texture=0, seed=seed)
    x = np.stack([nz.flatten_mesh(m) for m in meshes])
    data = Dataset(nz.apply(nz.fit("minmax", x), x), None, labels)
    cfg = ModelConfig(latent_size=16, mesh_input_size=150, conditioned=True, label_count=1, beta=1e-4, seed=seed)
    model = build_mesh_vae(cfg)
    report = fit(model, data, TrainConfig(epochs=500, batch_size=16, beta=1e-4, seed=seed))
    return report.train_errors


def test_03_overfit_capacity(verdict):
    t0 = time.perf_counter()
    first = _overfit_run(0)
    again = _overfit_run(0)
    secs = time.perf_counter() - t0
    final = first[-1]
    ok = final < 1e-2 and first == again and secs < 60
    verdict(3, "overfit 8-frame sequence, mesh CVAE N=50 L=16 beta=1e-4", ok,
            f"train err after 500 epochs {final:.2e} (< 1e-2), rerun identical={first == again}, {secs:.1f}s for 2 runs")


# ---------------------------------------------------------------- 4

REFERENCE_DECODE_S = 0.00679
BUDGET_S = 1 / 90


@pytest.mark.slow
def test_04_decode_latency(verdict):
    model = build_mesh_vae(ModelConfig(latent_size=128, mesh_input_size=10929))
    res = bench_decode(model, trials=1000, warmup=10)
    ok = res.mean_s < BUDGET_S
    verdict(4, "decode latency M=10929 L=128 float32, 1000 trials", ok,
            f"mean {1e3 * res.mean_s:.2f} ms, p99 {1e3 * res.p99_s:.2f} ms, {res.hz:.1f} Hz; "
            f"ceiling {1e3 * BUDGET_S:.2f} ms, reference {1e3 * REFERENCE_DECODE_S:.2f} ms "
            f"({res.mean_s / REFERENCE_DECODE_S:.2f}x reference)")


# ---------------------------------------------------------------- 5

# a frequently quoted figure for this reduction; the arithmetic gives ~8.11e-5
QUOTED_RATIO = 8e-3


def test_05_compression_accounting(verdict):
    st = compression_stats(4000, 256, 1024)
    exact = 256 / 3157728
    ok = (st.raw_floats_per_frame == 3157728 and st.ratio == exact
          and round(st.ratio, 7) == 8.11e-5 and st.ratio < QUOTED_RATIO / 50)
    verdict(5, "compression accounting N=4000, 1024^2 texture, L=256", ok,
            f"raw={st.raw_floats_per_frame}, ratio={st.ratio:.4e}; the quoted 8e-3 is "
            f"{QUOTED_RATIO / st.ratio:.0f}x the computed ratio and is not matched")


# ---------------------------------------------------------------- 6

def _codec_round(seed=0):
    meshes, textures, labels, names = synthetic_sequences(3, 5, 12, 16, seed)
    x = np.stack([nz.flatten_mesh(m) for m in meshes])
    ms = nz.fit("minmax", x)
    ts = nz.fit("minmax", nz.texture_features(np.stack([t.pixels for t in textures])))
    model = build_model(ModelConfig(latent_size=6, mesh_input_size=36, texture_size=16, conditioned=True,
                                    label_count=3, label_names=tuple(names)))
    blob = write_container(encode_sequence(model, meshes, ms, textures, ts, labels))
    out_m, out_t = decode_sequence(model, read_container(blob))
    return blob, np.stack([m.vertices for m in out_m]), np.stack([t.pixels for t in out_t])


def test_06_codec_round_trip(verdict):
    b1, m1, t1 = _codec_round()
    b2, m2, t2 = _codec_round()
    deterministic = b1 == b2 and np.array_equal(m1, m2) and np.array_equal(t1, t2)
    byte_identical = write_container(read_container(b1)) == b1
    truncations = 0
    for n in range(len(b1)):
        try:
            read_container(b1[:n])
        except ContainerError:
            truncations += 1
    ok = deterministic and byte_identical and truncations == len(b1)
    verdict(6, "codec determinism, byte round-trip, truncation", ok,
            f"deterministic={deterministic}, rewrite identical={byte_identical}, "
            f"{truncations}/{len(b1)} truncated prefixes rejected")


# ---------------------------------------------------------------- 7

def _kl_oracle(mu, log_var):
    var = np.exp(log_var)
    return 0.5 * np.sum(mu ** 2 + var - 1.0 - log_var, axis=-1)


def _kl_monte_carlo(mu, log_var, samples, seed):
    rng = np.random.default_rng(seed)
    sd = np.exp(0.5 * log_var)
    z = mu + sd * rng.standard_normal((samples, len(mu)))
    log_q = -0.5 * np.sum(((z - mu) / sd) ** 2 + log_var + math.log(2 * math.pi), axis=1)
    log_p = -0.5 * np.sum(z ** 2 + math.log(2 * math.pi), axis=1)
    return float(np.mean(log_q - log_p))


def test_07_kl_and_loss_identities(verdict):
    zero = kl_divergence(np.zeros((1, 8)), np.zeros((1, 8)))
    rng = np.random.default_rng(7)
    mu = rng.normal(0, 2, (100000, 8))
    lv = rng.normal(0, 2, (100000, 8))
    mu[:1000] *= 1e-9  # near the prior, where rounding matters most
    lv[:1000] *= 1e-9
    kls = np.array([kl_divergence(mu[i:i + 1], lv[i:i + 1]) for i in range(len(mu))])
    oracle = _kl_oracle(mu, lv)
    nonneg = bool(np.all(kls >= 0))
    matches = bool(np.allclose(kls, np.maximum(oracle, 0), rtol=1e-12, atol=1e-15))

    mc_mu, mc_lv = np.array([0.7, -1.2, 0.3, 0.0]), np.array([-0.5, 0.4, 0.0, -1.0])
    closed = kl_divergence(mc_mu[None], mc_lv[None])
    mc = _kl_monte_carlo(mc_mu, mc_lv, 1_000_000, seed=11)
    rel = abs(mc - closed) / closed

    y, yh = rng.normal(size=(16, 150)), rng.normal(size=(16, 150))
    t, th = rng.normal(size=(16, 8, 8, 3)), rng.normal(size=(16, 8, 8, 3))
    total, c = total_loss((y, yh), (t, th), mu[:16], lv[:16], beta=1e-3)
    gap = abs(c["mse_texture"] + c["mse_mesh"] + c["beta_kl"] - total)

    ok = zero == 0.0 and nonneg and matches and rel < 0.01 and gap <= 1e-12
    verdict(7, "KL and loss identities", ok,
            f"KL(0,0)={zero}, 1e5 inputs >= 0: {nonneg}, closed form vs oracle: {matches}, "
            f"MC(1e6) rel err {rel:.2e} (< 1e-2), component sum gap {gap:.1e} (<= 1e-12)")


# ---------------------------------------------------------------- 8

CVAE_EPOCHS = 400


def _cvae_pair(seed):
    meshes, _, labels, _ = synthetic_sequences(classes=3, frames=20, vertices=50, texture=0, seed=seed)
    x = np.stack([nz.flatten_mesh(m) for m in meshes])
    tr, te = split_indices(labels.tolist(), 0.9, seed)
    spec = nz.fit("minmax", x[tr])
    data = Dataset(nz.apply(spec, x), None, labels)
    train, test = data.subset(tr), data.subset(te)
    tc = TrainConfig(epochs=CVAE_EPOCHS, batch_size=16, beta=1e-3, seed=seed)
    errs = []
    for cond in (True, False):
        cfg = ModelConfig(latent_size=16, mesh_input_size=150, conditioned=cond,
                          label_count=3 if cond else 0, beta=1e-3, seed=seed)
        model = build_mesh_vae(cfg)
        fit(model, train, tc)
        errs.append(reconstruction_error(model, test))
    return errs


@pytest.mark.slow
def test_08_cvae_trend(verdict):
    results = {seed: _cvae_pair(seed) for seed in range(5)}
    wins = sum(c <= u for c, u in results.values())
    detail = "; ".join(f"seed {s}: {c:.4f} vs {u:.4f}" for s, (c, u) in results.items())
    verdict(8, "conditioned test error <= unconditioned, >= 4 of 5 seeds", wins >= 4,
            f"{wins}/5 seeds ({detail})")


# ---------------------------------------------------------------- 9

def test_09_normalization_round_trip(verdict):
    rng = np.random.default_rng(9)
    fit_data = rng.normal(5.0, 3.0, (500, 12))
    probe = rng.normal(5.0, 6.0, (1000, 12))
    worst = {}
    for kind in nz.KINDS:
        spec = nz.fit(kind, fit_data)
        worst[kind] = float(np.max(np.abs(nz.invert(spec, nz.apply(spec, probe)) - probe)))
        worst[kind + "^-1"] = float(np.max(np.abs(nz.apply(spec, nz.invert(spec, probe)) - probe)))
    y = nz.apply(nz.fit("minmax", fit_data), fit_data)
    extremes = bool(np.all(y.min(0) == -1.0) and np.all(y.max(0) == 1.0))
    ok = max(worst.values()) < 1e-6 and extremes
    verdict(9, "normalization round trip (1000 vectors, 3 kinds)", ok,
            f"max abs err {max(worst.values()):.1e} (< 1e-6), min-max extremes exactly -1/+1: {extremes}")


# ---------------------------------------------------------------- 10

class _LeakCounter(FrameSource):
    def __init__(self, n):
        self.n, self.out = n, 0
        self.lock = threading.Lock()

    def __len__(self):
        return self.n

    def acquire(self, index):
        with self.lock:
            self.out += 1
        return index

    def release(self, frame):
        with self.lock:
            self.out -= 1


def test_10_playback_pacing(verdict):
    fps = 24
    events = play(PlaybackConfig(fps), ListSource([np.zeros((10, 3)) for _ in range(100)]))
    mean_gap = float(np.mean(np.diff([e.present_timestamp for e in events])))
    pacing = abs(mean_gap - 1 / fps) <= 0.2 / fps

    leaks = []
    for prefetch in (0, 3):
        src = _LeakCounter(100)

        def sink(i, frame):
            if i == 50:
                raise RuntimeError("forced abort")

        try:
            play(PlaybackConfig(fps), src, sink, prefetch=prefetch)
        except RuntimeError:
            pass
        leaks.append(src.out)
    ok = len(events) == 100 and pacing and leaks == [0, 0]
    verdict(10, "playback pacing at 24 fps, 100 frames", ok,
            f"mean interval {1e3 * mean_gap:.2f} ms vs {1e3 / fps:.2f} ms (+-20%), "
            f"leaks after abort at frame 50: inline={leaks[0]}, prefetch={leaks[1]}")


# ---------------------------------------------------------------- 11

def test_11_pca_correctness(verdict):
    rng = np.random.default_rng(11)
    d, n = 10, 20000
    axis = rng.standard_normal(d)
    axis /= np.linalg.norm(axis)
    x = 100.0 * rng.standard_normal((n, 1)) * axis + rng.standard_normal((n, d)) + 3.0
    model = pca_fit(x, d)
    angle = math.acos(min(1.0, abs(float(model.components[0] @ axis))))
    ortho = float(np.max(np.abs(model.components @ model.components.T - np.eye(d))))
    recon = float(np.max(np.abs(pca_reconstruct(model, pca_project(model, x)) - x)))
    ok = angle < 1e-3 and ortho < 1e-6 and recon < 1e-6
    verdict(11, "PCA known axis, orthonormality, full-rank identity", ok,
            f"angle {angle:.1e} rad (< 1e-3), orthonormality err {ortho:.1e}, reconstruction err {recon:.1e} (< 1e-6)")
