"""Command line entry point: ``fourdvc <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.

Model directories hold ``model.cfg`` (key=value ModelConfig), ``model.vcwt``
(parameters) and ``normalization.json`` (mesh/texture specs).  Every
subcommand writes ``run_config.txt`` with its resolved arguments into its
output directory before doing any work.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import normalize as nz
from .analysis import interpolate_latents, pca_fit, pca_project, projection_csv, sample_latents
from .asset_io import (MeshFrame, TextureFrame, load_sequence, parse_obj, read_manifest, write_obj,
                       write_ppm)
from .codec import (BENCH_HEADER, bench_decode, compression_stats, decode_sequence, encode_sequence,
                    read_container, write_container)
from .errors import DataError, FourDVCError, NumericalError, UsageError
from .player import (EncodedSource, ManifestSource, PlaybackConfig, deadline_misses, events_csv, play)
from .synthetic import make_synthetic_dataset
from .tensor_ops import load_checkpoint
from .train import Dataset, TrainConfig, fit, split
from .vae import ModelConfig, build_model

log = logging.getLogger("fourdvc")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
REFERENCE_DECODE_S = 0.00679
REALTIME_BUDGET_S = 1 / 90


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _prepare_out(args):
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.txt"), "w") as fh:
        for k, v in sorted(vars(args).items()):
            if k != "func":
                fh.write(f"{k}={v}\n")


def _write(path, data):
    with open(path, "wb" if isinstance(data, bytes) else "w") as fh:
        fh.write(data)


def _load_model(model_dir):
    with open(os.path.join(model_dir, "model.cfg")) as fh:
        cfg = ModelConfig.from_text(fh.read())
    model = build_model(cfg)
    with open(os.path.join(model_dir, "model.vcwt"), "rb") as fh:
        blob = fh.read()
    model.load_state_dict(load_checkpoint(blob))
    specs = {}
    path = os.path.join(model_dir, "normalization.json")
    if os.path.exists(path):
        with open(path) as fh:
            specs = {k: nz.NormalizationSpec.from_dict(v) for k, v in json.load(fh).items()}
    return model, specs


def _arrays(meshes, textures):
    mesh = np.stack([nz.flatten_mesh(m) for m in meshes])
    tex = np.stack([t.pixels for t in textures]) if textures else None
    return mesh, tex


def _fit_specs(mesh, tex, kind, target):
    specs = {"mesh": nz.fit(kind, mesh, target)}
    if tex is not None:
        specs["texture"] = nz.fit(kind, nz.texture_features(tex), target)
    return specs


def _texture_size(textures):
    if not textures:
        return None
    h, w = textures[0].pixels.shape[:2]
    if h != w:
        raise UsageError(f"textures must be square, got {h}x{w}")
    return h


def _write_frames(out, meshes, textures, prefix="frame"):
    for k, m in enumerate(meshes):
        _write(os.path.join(out, f"{prefix}_{k:04d}.obj"), write_obj(m))
        if textures:
            _write(os.path.join(out, f"{prefix}_{k:04d}.ppm"), write_ppm(textures[k]))


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    _prepare_out(args)
    path = make_synthetic_dataset(args.out, args.classes, args.frames, args.vertices, args.texture, args.seed)
    print(path)


def cmd_ingest(args):
    _prepare_out(args)
    manifest = read_manifest(args.manifest)
    meshes, textures = load_sequence(manifest)
    mesh, tex = _arrays(meshes, textures)
    specs = _fit_specs(mesh, tex, args.norm, tuple(args.target))
    _write(os.path.join(args.out, "normalization.json"),
           json.dumps({k: v.to_dict() for k, v in specs.items()}))
    summary = {
        "frames": len(meshes), "vertices": meshes[0].vertex_count, "faces": len(meshes[0].faces),
        "mesh_input_size": mesh.shape[1], "labels": ",".join(manifest.label_set),
        "texture": "x".join(map(str, tex.shape[1:3])) if tex is not None else "",
        "normalization": args.norm,
    }
    text = "".join(f"{k}={v}\n" for k, v in summary.items())
    _write(os.path.join(args.out, "summary.txt"), text)
    sys.stdout.write(text)


def cmd_train(args):
    from .plotting import plot_training
    _prepare_out(args)
    manifest = read_manifest(args.manifest)
    train_m, test_m = split(manifest, args.split, args.seed)
    tr_mesh, tr_tex = load_sequence(train_m)
    te_mesh, te_tex = load_sequence(test_m)
    target = (-1.0, 1.0) if args.output_activation == "tanh" else (0.0, 1.0)
    mesh, tex = _arrays(tr_mesh, tr_tex)
    specs = _fit_specs(mesh, tex, "minmax", target)
    labels = manifest.label_set
    cfg = ModelConfig(latent_size=args.latent, mesh_input_size=mesh.shape[1],
                      texture_size=_texture_size(tr_tex), conditioned=args.conditioned,
                      label_count=len(labels) if args.conditioned else 0,
                      output_activation=args.output_activation, beta=args.beta, seed=args.seed,
                      label_names=labels if args.conditioned else ())
    tcfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch,
                       beta=args.beta, seed=args.seed, split_fraction=args.split)

    def dataset(m, meshes, textures):
        x, t = _arrays(meshes, textures)
        t = nz.apply(specs["texture"], t) if t is not None else None
        ids = np.array([labels.index(r.label) for r in m.rows])
        return Dataset(nz.apply(specs["mesh"], x), t, ids)

    model = build_model(cfg)
    _write(os.path.join(args.out, "model.cfg"), cfg.to_text())
    _write(os.path.join(args.out, "normalization.json"),
           json.dumps({k: v.to_dict() for k, v in specs.items()}))
    ckpt = os.path.join(args.out, "model.vcwt")
    report = fit(model, dataset(train_m, tr_mesh, tr_tex), tcfg, dataset(test_m, te_mesh, te_tex),
                 checkpoint_path=ckpt, checkpoint_every=args.checkpoint_every,
                 on_epoch=lambda e: log.info("epoch %d train %.5f test %.5f", e.epoch, e.train_err, e.test_err))
    _write(os.path.join(args.out, "report.csv"), report.to_csv())
    if report.epochs:
        plot_training(report, os.path.join(args.out, "loss.png"))
        last = report.epochs[-1]
        print(f"epochs={len(report.epochs)} train_err={last.train_err:.6g} test_err={last.test_err:.6g}")


def cmd_encode(args):
    _prepare_out(args)
    model, specs = _load_model(args.model)
    manifest = read_manifest(args.manifest)
    meshes, textures = load_sequence(manifest)
    labels = [r.label for r in manifest.rows] if model.config.conditioned else None
    seq = encode_sequence(model, meshes, specs["mesh"], textures, specs.get("texture"), labels)
    blob = write_container(seq)
    path = os.path.join(args.out, "sequence.4dvc")
    _write(path, blob)
    st = compression_stats(meshes[0].vertex_count, model.config.latent_size, model.config.texture_size,
                           len(meshes), len(meshes[0].faces), model.config.conditioned)
    print(f"{path} frames={seq.frame_count} bytes={len(blob)} ratio={st.ratio:.6g}")


def cmd_decode(args):
    _prepare_out(args)
    model, _ = _load_model(args.model)
    with open(args.input, "rb") as fh:
        seq = read_container(fh.read())
    meshes, textures = decode_sequence(model, seq)
    _write_frames(args.out, meshes, textures)
    print(f"decoded {len(meshes)} frames into {args.out}")


def cmd_interpolate(args):
    _prepare_out(args)
    model, specs = _load_model(args.model)
    cfg = model.config
    L = cfg.latent_size
    z_a = sample_latents(1, L, args.seed_a)[0]
    z_b = sample_latents(1, L, args.seed_b)[0]
    label = None
    if cfg.conditioned:
        label = cfg.label_names.index(args.label) if args.label else 0
    frames = interpolate_latents(model, z_a, z_b, args.steps, label)
    faces = np.zeros((0, 3), dtype=np.int64)
    if args.faces_from:
        with open(args.faces_from, "rb") as fh:
            faces = parse_obj(fh.read()).faces
    meshes, textures = [], []
    for k, (mo, to) in enumerate(frames):
        if mo is not None:
            meshes.append(MeshFrame(nz.invert(specs["mesh"], mo).reshape(-1, 3), faces, k))
        if to is not None:
            px = nz.invert(specs["texture"], to)
            textures.append(TextureFrame(np.clip(px, 0, 255)))
    _write_frames(args.out, meshes, textures, "interp")
    print(f"wrote {len(frames)} interpolated frames into {args.out}")


def cmd_analyze(args):
    from .plotting import plot_projection
    _prepare_out(args)
    manifest = read_manifest(args.manifest)
    meshes, _ = load_sequence(manifest)
    x = np.stack([nz.flatten_mesh(m) for m in meshes])
    pca = pca_fit(x, args.k)
    coords = pca_project(pca, x)
    labels = [r.label for r in manifest.rows]
    _write(os.path.join(args.out, "pca.csv"), projection_csv(labels, coords))
    if args.k >= 2:
        plot_projection(labels, coords, os.path.join(args.out, "pca.png"), pca.explained)
    print("explained=" + ",".join(f"{e:.6f}" for e in pca.explained))


def cmd_bench(args):
    from .plotting import plot_latency
    _prepare_out(args)
    if args.model:
        model, specs = _load_model(args.model)
    else:
        if not args.vertices:
            raise UsageError("bench needs --model or --vertices")
        model = build_model(ModelConfig(latent_size=args.latent, mesh_input_size=3 * args.vertices,
                                        texture_size=args.texture or None, seed=args.seed))
        specs = {}
    res = bench_decode(model, args.trials, args.warmup, args.seed, specs.get("mesh"), specs.get("texture"))
    line = res.record()
    _write(os.path.join(args.out, "bench.csv"), f"{BENCH_HEADER}\n{line}\n")
    plot_latency(res, os.path.join(args.out, "latency.png"), REALTIME_BUDGET_S, REFERENCE_DECODE_S)
    print(line)


def cmd_play(args):
    from .plotting import plot_playback
    _prepare_out(args)
    if args.input:
        if not args.model:
            raise UsageError("play --input needs --model")
        model, _ = _load_model(args.model)
        with open(args.input, "rb") as fh:
            source = EncodedSource(model, read_container(fh.read()))
    elif args.manifest:
        source = ManifestSource(read_manifest(args.manifest))
    else:
        raise UsageError("play needs --manifest or --input")
    cfg = PlaybackConfig(args.fps, loop=args.passes > 1, passes=args.passes)
    events = play(cfg, source, prefetch=args.prefetch)
    _write(os.path.join(args.out, "events.csv"), events_csv(events))
    if events:
        plot_playback(events, args.fps, os.path.join(args.out, "playback.png"))
    print(f"frames={len(events)} misses={deadline_misses(events, args.fps)}")


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="fourdvc", description="Latent codec for mesh + texture sequences.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic mesh/texture corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--vertices", type=int, default=50)
    s.add_argument("--texture", type=int, default=16, help="texture size, 0 for none")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="validate a manifest and fit normalization")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--norm", choices=nz.KINDS, default="minmax")
    s.add_argument("--target", type=float, nargs=2, default=(-1.0, 1.0))
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train a model on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--latent", type=int, default=16)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--beta", type=float, default=1e-3)
    s.add_argument("--split", type=float, default=0.9)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--conditioned", action="store_true")
    s.add_argument("--output-activation", choices=("tanh", "sigmoid"), default="tanh")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("encode", help="encode manifest frames into a 4DVC container")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="decode a 4DVC container to OBJ/PPM frames")
    s.add_argument("--input", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("interpolate", help="decode a line between two random latents")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--seed-a", type=int, default=1)
    s.add_argument("--seed-b", type=int, default=2)
    s.add_argument("--label")
    s.add_argument("--faces-from", help="OBJ whose faces are attached to the output meshes")
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("analyze", help="PCA projection of the mesh frames")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=2)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("bench", help="single-frame decode latency")
    s.add_argument("--model")
    s.add_argument("--vertices", type=int)
    s.add_argument("--latent", type=int, default=128)
    s.add_argument("--texture", type=int, default=0)
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("play", help="paced playback with a per-frame event log")
    s.add_argument("--manifest")
    s.add_argument("--input")
    s.add_argument("--model")
    s.add_argument("--fps", type=float, default=24.0)
    s.add_argument("--prefetch", type=int, default=2)
    s.add_argument("--passes", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_play)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"fourdvc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"fourdvc: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"fourdvc: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FourDVCError as exc:
        print(f"fourdvc: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
