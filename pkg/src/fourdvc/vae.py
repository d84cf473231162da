"""Mesh, texture and joint mesh-texture variational autoencoders.

The mesh branch is a fully connected ladder M -> M/2 -> M/4 -> M/8 -> M/12 -> 256
(floor division), every hidden linear followed by batch norm and leaky ReLU.
The texture branch alternates conv(F=4, S=2, P=1) and 2x2 max pooling down to a
4x4 map, then linear 2048 -> 1024 -> 512 -> 256 at 1024^2 input.  Decoders
mirror the computed encoder widths exactly.  The joint model concatenates
both 256-wide branch encodings into a 512-wide fused vector.

Latent heads produce the mean and the log-variance (2 log sigma).
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConditioningError, ConfigError
from .rng import XorShift64Star
from .tensor_ops import (Activation, BatchNorm, Conv2d, ConvTranspose2d, Linear,
                         MaxPool2d, Reshape, Sequential, checkpoint_fingerprint,
                         save_checkpoint)

BRANCH_WIDTH = 256
TEXTURE_FC = (1024, 512, 256)


@dataclass(frozen=True)
class ModelConfig:
    latent_size: int
    mesh_input_size: int | None = None  # M = 3N
    texture_size: int | None = None  # H = W
    conditioned: bool = False
    label_count: int = 0
    leaky_slope: float = 0.2
    output_activation: str = "tanh"
    beta: float = 1e-3
    fusion_width: int = 512
    seed: int = 0
    label_names: tuple = ()

    def __post_init__(self):
        if self.latent_size < 1:
            raise ConfigError("latent_size must be positive")
        if self.mesh_input_size is None and self.texture_size is None:
            raise ConfigError("a model needs a mesh branch, a texture branch, or both")
        if self.output_activation not in ("tanh", "sigmoid"):
            raise ConfigError("output_activation must be tanh or sigmoid")
        if self.conditioned and self.label_count < 1:
            raise ConfigError("a conditioned model needs label_count >= 1")
        if self.label_names and len(self.label_names) != self.label_count:
            raise ConfigError("label_names must have label_count entries")
        object.__setattr__(self, "label_names", tuple(self.label_names))

    @property
    def kind(self):
        if self.mesh_input_size and self.texture_size:
            return "joint"
        return "mesh" if self.mesh_input_size else "texture"

    @property
    def target_range(self):
        return (-1.0, 1.0) if self.output_activation == "tanh" else (0.0, 1.0)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "label_names":
                v = ",".join(v)
            elif v is None:
                v = ""
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for k, v in kv.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            if k == "label_names":
                out[k] = tuple(x for x in v.split(",") if x)
            elif k in ("mesh_input_size", "texture_size"):
                out[k] = int(v) if v else None
            elif k == "conditioned":
                out[k] = v.lower() in ("1", "true", "yes")
            elif k in ("latent_size", "label_count", "fusion_width", "seed"):
                out[k] = int(v)
            elif k in ("leaky_slope", "beta"):
                out[k] = float(v)
            else:
                out[k] = v
        return cls(**out)


def mesh_ladder(m):
    """Encoder widths of the fully connected mesh branch."""
    if m < 24:
        raise ConfigError(f"mesh input size {m} too small; need M >= 24 so M/12 >= 2")
    return [m, m // 2, m // 4, m // 8, m // 12, BRANCH_WIDTH]


def texture_ladder(size):
    """(kind, in_shape, out_shape) of the conv/pool stages, shapes as (C, H, W)."""
    if size < 16 or size & (size - 1):
        raise ConfigError(f"texture size {size} must be a power of two >= 16")
    stages, shape, convs = [], (3, size, size), 0
    while shape[1] > 4:
        c, h, w = shape
        if len(stages) % 2 == 0:
            out_c = 16 if convs == 0 else 2 * c
            convs += 1
            nxt = (out_c, h // 2, w // 2)
            stages.append(("conv", shape, nxt))
        else:
            nxt = (c, h // 2, w // 2)
            stages.append(("maxpool", shape, nxt))
        shape = nxt
    return stages


def _block(n_in, n_out, rng, dtype, slope):
    return [Linear(n_in, n_out, rng, dtype), BatchNorm(n_out, dtype), Activation("leaky_relu", slope)]


def _onehot(labels, count, batch, dtype):
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = np.full(batch, int(labels))
    if labels.ndim == 2:
        if labels.shape != (batch, count):
            raise ConditioningError(f"one-hot labels must be ({batch}, {count}), got {labels.shape}")
        return labels.astype(dtype)
    if labels.shape != (batch,):
        raise ConditioningError(f"need {batch} labels, got {labels.shape[0]}")
    if labels.min() < 0 or labels.max() >= count:
        raise ConditioningError(f"label id outside [0, {count})")
    out = np.zeros((batch, count), dtype=dtype)
    out[np.arange(batch), labels.astype(np.int64)] = 1
    return out


class VaeModel:
    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        cfg, slope = config, config.leaky_slope
        c = cfg.label_count if cfg.conditioned else 0
        L = cfg.latent_size
        self.mesh_enc = self.mesh_dec = None
        self.tex_conv = self.tex_fc = self.tex_fc_dec = self.tex_deconv = None
        self.mesh_widths = None
        self.tex_stages = None

        if cfg.mesh_input_size:
            w = mesh_ladder(cfg.mesh_input_size)
            self.mesh_widths = w
            enc = []
            for i in range(len(w) - 1):
                enc += _block(w[i] + (c if i == 0 else 0), w[i + 1], rng, dtype, slope)
            self.mesh_enc = Sequential(enc)
            dec = []
            for i in range(len(w) - 1, 1, -1):
                dec += _block(w[i], w[i - 1], rng, dtype, slope)
            dec += [Linear(w[1], w[0], rng, dtype), Activation(cfg.output_activation)]
            self.mesh_dec = Sequential(dec)

        if cfg.texture_size:
            stages = texture_ladder(cfg.texture_size)
            self.tex_stages = stages
            conv = []
            for kind, sin, sout in stages:
                if kind == "conv":
                    conv += [Conv2d(sin[0], sout[0], 4, 2, 1, rng, dtype), BatchNorm(sout[0], dtype),
                             Activation("leaky_relu", slope)]
                else:
                    conv.append(MaxPool2d())
            last = stages[-1][2]
            flat = last[0] * last[1] * last[2]
            self.tex_flat = flat
            conv.append(Reshape((flat,)))
            self.tex_conv = Sequential(conv)
            tc = c if cfg.kind == "texture" else 0
            widths = (flat,) + TEXTURE_FC
            fc = []
            for i in range(len(widths) - 1):
                fc += _block(widths[i] + (tc if i == 0 else 0), widths[i + 1], rng, dtype, slope)
            self.tex_fc = Sequential(fc)
            fcd = []
            for i in range(len(widths) - 1, 0, -1):
                fcd += _block(widths[i], widths[i - 1], rng, dtype, slope)
            fcd.append(Reshape(last))
            self.tex_fc_dec = Sequential(fcd)
            deconv = []
            for n, (kind, sin, sout) in enumerate(reversed(stages)):
                deconv.append(ConvTranspose2d(sout[0], sin[0], 4, 2, 1, rng, dtype))
                if n == len(stages) - 1:
                    deconv.append(Activation(cfg.output_activation))
                else:
                    deconv += [BatchNorm(sin[0], dtype), Activation("leaky_relu", slope)]
            self.tex_deconv = Sequential(deconv)

        if cfg.kind == "joint":
            if cfg.fusion_width != 2 * BRANCH_WIDTH:
                raise ConfigError(f"joint fusion width {cfg.fusion_width} must equal two "
                                  f"{BRANCH_WIDTH}-wide branch encodings")
            enc_width = cfg.fusion_width
        else:
            enc_width = BRANCH_WIDTH
        self.enc_width = enc_width
        self.mu_head = Linear(enc_width, L, rng, dtype)
        self.logvar_head = Linear(enc_width, L, rng, dtype)
        self.dec_in = Sequential(_block(L + c, enc_width, rng, dtype, slope))
        self._check_mirror()
        self._train_cache = None

    # ------------------------------------------------------------ structure

    def sequentials(self):
        named = [("mesh_enc", self.mesh_enc), ("tex_conv", self.tex_conv), ("tex_fc", self.tex_fc),
                 ("mu_head", Sequential([self.mu_head])), ("logvar_head", Sequential([self.logvar_head])),
                 ("dec_in", self.dec_in), ("mesh_dec", self.mesh_dec),
                 ("tex_fc_dec", self.tex_fc_dec), ("tex_deconv", self.tex_deconv)]
        return [(n, s) for n, s in named if s is not None]

    def layers(self):
        for name, seq in self.sequentials():
            for i, layer in enumerate(seq):
                yield f"{name}.{i}", layer

    def named_parameters(self):
        for lname, layer in self.layers():
            for k in layer.params:
                yield f"{lname}.{k}", layer, k

    def parameters(self):
        return {name: layer.params[k] for name, layer, k in self.named_parameters()}

    def gradients(self):
        out = {}
        for name, layer, k in self.named_parameters():
            g = layer.grads.get(k)
            out[name] = g if g is not None else np.zeros_like(layer.params[k])
        return out

    def zero_grad(self):
        for _, layer in self.layers():
            layer.zero_grad()

    def state_dict(self):
        state = {}
        for lname, layer in self.layers():
            for k, v in layer.params.items():
                state[f"{lname}.{k}"] = v
            for k, v in layer.buffers.items():
                state[f"{lname}.{k}"] = v
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise ConfigError(f"checkpoint does not match model (missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]})")
        for lname, layer in self.layers():
            for d in (layer.params, layer.buffers):
                for k in d:
                    src = state[f"{lname}.{k}"]
                    if src.shape != d[k].shape:
                        raise ConfigError(f"{lname}.{k}: shape {src.shape} != {d[k].shape}")
                    d[k] = np.array(src, dtype=self.dtype)

    def to_checkpoint(self):
        return save_checkpoint(self.state_dict())

    def fingerprint(self):
        return checkpoint_fingerprint(self.to_checkpoint())

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for _, layer in self.layers():
            layer.astype(dtype)
        return self

    def parameter_count(self):
        return sum(p.size for p in self.parameters().values())

    def _check_mirror(self):
        """Every encoder transition (a -> b) needs exactly one decoder transition (b -> a)."""
        c = self.config.label_count if self.config.conditioned else 0
        kind = self.config.kind

        def linear_pairs(seq, strip_first=0):
            out = [(layer.n_in, layer.n_out) for layer in seq if isinstance(layer, Linear)]
            if out and strip_first:
                out[0] = (out[0][0] - strip_first, out[0][1])
            return out

        enc, dec = [], []
        if self.mesh_enc is not None:
            enc += linear_pairs(self.mesh_enc, c if kind != "texture" else 0)
            dec += linear_pairs(self.mesh_dec)
        if self.tex_conv is not None:
            enc += [(sin, sout) for _, sin, sout in self.tex_stages]
            enc += linear_pairs(self.tex_fc, c if kind == "texture" else 0)
            dec += linear_pairs(self.tex_fc_dec)
            shape = self.tex_fc_dec.output_shape((TEXTURE_FC[-1],))
            for layer in self.tex_deconv:
                if isinstance(layer, ConvTranspose2d):
                    nxt = layer.output_shape(shape)
                    dec.append((shape, nxt))
                    shape = nxt
        enc.append((self.enc_width, self.config.latent_size))
        dec += linear_pairs(self.dec_in, c)
        if sorted(map(repr, enc)) != sorted(repr((b, a)) for a, b in dec):
            raise ConfigError(f"decoder does not mirror encoder: {enc} vs {dec}")

    def layer_table(self):
        """Texture branch shape transitions as (name, in_shape, out_shape), (H, W, C) order.

        Returns (encoder_rows, decoder_rows); decoder rows are in execution order.
        """
        if self.tex_conv is None:
            return [], []

        def hwc(s):
            return (s[1], s[2], s[0]) if len(s) == 3 else s

        enc, n_conv, n_pool = [], 0, 0
        shape = (3, self.config.texture_size, self.config.texture_size)
        for layer in self.tex_conv:
            if isinstance(layer, (Conv2d, MaxPool2d)):
                nxt = layer.output_shape(shape)
                if isinstance(layer, Conv2d):
                    n_conv += 1
                    name = f"Conv{n_conv}"
                else:
                    n_pool += 1
                    name = f"MaxPool{n_pool}"
                enc.append((name, hwc(shape), hwc(nxt)))
                shape = nxt
            elif isinstance(layer, Reshape):
                shape = layer.output_shape(shape)
        fc = [layer for layer in self.tex_fc if isinstance(layer, Linear)]
        prev = enc[-1][2]
        for i, layer in enumerate(fc, 1):
            enc.append((f"Linear{i}", prev, (layer.n_out,)))
            prev = (layer.n_out,)

        dec = []
        fcd = [layer for layer in self.tex_fc_dec if isinstance(layer, Linear)]
        for i, layer in zip(range(len(fcd), 0, -1), fcd):
            dec.append((f"Linear{i}", (layer.n_in,), (layer.n_out,)))
        shape = self.tex_fc_dec.output_shape((TEXTURE_FC[-1],))
        k = 0
        for layer in self.tex_deconv:
            if isinstance(layer, ConvTranspose2d):
                k += 1
                nxt = layer.output_shape(shape)
                dec.append((f"TransConv{k}", hwc(shape), hwc(nxt)))
                shape = nxt
        return enc, dec

    # ------------------------------------------------------------ inputs

    def _prep(self, mesh, texture, labels):
        cfg = self.config
        batch = None
        if cfg.mesh_input_size:
            if mesh is None:
                raise ConfigError("this model needs a mesh input")
            mesh = np.asarray(mesh, dtype=self.dtype)
            if mesh.ndim == 1:
                mesh = mesh[None]
            batch = mesh.shape[0]
        if cfg.texture_size:
            if texture is None:
                raise ConfigError("this model needs a texture input")
            texture = np.asarray(texture, dtype=self.dtype)
            if texture.ndim == 3:
                texture = texture[None]
            if texture.shape[1:] != (cfg.texture_size, cfg.texture_size, 3):
                raise ConfigError(f"texture must be {cfg.texture_size}x{cfg.texture_size}x3")
            if batch is not None and texture.shape[0] != batch:
                raise ConfigError("mesh and texture batch sizes differ")
            batch = texture.shape[0]
            texture = np.ascontiguousarray(texture.transpose(0, 3, 1, 2))
        return mesh, texture, self._labels(labels, batch)

    def _labels(self, labels, batch):
        cfg = self.config
        if cfg.conditioned:
            if labels is None:
                raise ConditioningError("conditioned model needs a label")
            return _onehot(labels, cfg.label_count, batch, self.dtype)
        if labels is not None:
            raise ConditioningError("unconditioned model does not take labels")
        return None

    # ------------------------------------------------------------ passes

    def _encode(self, mesh, texture, onehot, training, cache):
        parts = []
        if self.mesh_enc is not None:
            x = mesh if onehot is None or self.config.kind == "texture" else np.concatenate([mesh, onehot], 1)
            parts.append(self.mesh_enc.forward(x, training, cache))
        if self.tex_conv is not None:
            h = self.tex_conv.forward(texture, training, cache)
            if onehot is not None and self.config.kind == "texture":
                h = np.concatenate([h, onehot], 1)
            parts.append(self.tex_fc.forward(h, training, cache))
        h = parts[0] if len(parts) == 1 else np.concatenate(parts, 1)
        mu = self.mu_head.forward(h, training, cache)
        lv = self.logvar_head.forward(h, training, cache)
        return mu, lv

    def _decode(self, z, onehot, training, cache):
        x = z if onehot is None else np.concatenate([z, onehot], 1)
        h = self.dec_in.forward(x, training, cache)
        mesh_out = tex_out = None
        if self.config.kind == "joint":
            hm, ht = h[:, :BRANCH_WIDTH], h[:, BRANCH_WIDTH:]
        else:
            hm = ht = h
        if self.mesh_dec is not None:
            mesh_out = self.mesh_dec.forward(hm, training, cache)
        if self.tex_deconv is not None:
            t = self.tex_fc_dec.forward(ht, training, cache)
            t = self.tex_deconv.forward(t, training, cache)
            tex_out = np.ascontiguousarray(t.transpose(0, 2, 3, 1))
        return mesh_out, tex_out

    def encode(self, mesh=None, texture=None, labels=None):
        """Eval-mode encoding; returns (mu, log_var), each (batch, L)."""
        mesh, texture, onehot = self._prep(mesh, texture, labels)
        return self._encode(mesh, texture, onehot, False, False)

    def decode(self, z, labels=None):
        """Eval-mode decoding; returns (mesh (batch, M) or None, texture (batch, H, W, 3) or None)."""
        z = np.asarray(z, dtype=self.dtype)
        if z.ndim == 1:
            z = z[None]
        if z.shape[1] != self.config.latent_size:
            raise ConfigError(f"latent must have length {self.config.latent_size}")
        onehot = self._labels(labels, z.shape[0])
        return self._decode(z, onehot, False, False)

    def forward_train(self, mesh=None, texture=None, labels=None, eps=None, training=True):
        """Training pass with reparameterized sampling; caches for :meth:`backward`."""
        mesh, texture, onehot = self._prep(mesh, texture, labels)
        mu, lv = self._encode(mesh, texture, onehot, training, True)
        if eps is None:
            eps = np.zeros_like(mu)
        eps = np.asarray(eps, dtype=self.dtype)
        sigma = np.exp(0.5 * lv)
        z = mu + sigma * eps
        mesh_out, tex_out = self._decode(z, onehot, training, True)
        self._train_cache = (eps, sigma, onehot)
        return mesh_out, tex_out, mu, lv

    def backward(self, g_mesh=None, g_tex=None, g_mu=None, g_lv=None):
        eps, sigma, onehot = self._train_cache
        L = self.config.latent_size
        gh_m = gh_t = None
        if self.mesh_dec is not None:
            gh_m = self.mesh_dec.backward(g_mesh if g_mesh is not None else
                                          np.zeros((eps.shape[0], self.config.mesh_input_size), self.dtype))
        if self.tex_deconv is not None:
            s = self.config.texture_size
            gt = g_tex if g_tex is not None else np.zeros((eps.shape[0], s, s, 3), self.dtype)
            gt = self.tex_deconv.backward(np.ascontiguousarray(np.asarray(gt).transpose(0, 3, 1, 2)))
            gh_t = self.tex_fc_dec.backward(gt)
        if self.config.kind == "joint":
            gh = np.concatenate([gh_m, gh_t], 1)
        else:
            gh = gh_m if gh_m is not None else gh_t
        gx = self.dec_in.backward(gh)
        gz = gx[:, :L]
        gmu = gz + (g_mu if g_mu is not None else 0)
        glv = gz * eps * (0.5 * sigma) + (g_lv if g_lv is not None else 0)
        gh = self.mu_head.backward(gmu) + self.logvar_head.backward(glv)
        if self.config.kind == "joint":
            gm, gt = gh[:, :BRANCH_WIDTH], gh[:, BRANCH_WIDTH:]
        else:
            gm = gt = gh
        if self.mesh_enc is not None:
            self.mesh_enc.backward(gm)
        if self.tex_conv is not None:
            g = self.tex_fc.backward(gt)
            if onehot is not None and self.config.kind == "texture":
                g = g[:, :self.tex_flat]
            self.tex_conv.backward(g)


def build_mesh_vae(config, dtype=np.float32):
    if not config.mesh_input_size or config.texture_size:
        raise ConfigError("mesh VAE needs mesh_input_size and no texture_size")
    return VaeModel(config, dtype)


def build_texture_vae(config, dtype=np.float32):
    if not config.texture_size or config.mesh_input_size:
        raise ConfigError("texture VAE needs texture_size and no mesh_input_size")
    return VaeModel(config, dtype)


def build_joint_vae(config, dtype=np.float32):
    if not (config.texture_size and config.mesh_input_size):
        raise ConfigError("joint VAE needs both mesh_input_size and texture_size")
    return VaeModel(config, dtype)


def build_model(config, dtype=np.float32):
    return VaeModel(config, dtype)


def reparameterize(mu, log_var, rng=0, eps=None):
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I) from the xorshift stream."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if eps is None:
        if not isinstance(rng, XorShift64Star):
            rng = XorShift64Star(rng)
        eps = rng.normals(mu.shape)
    return mu + np.exp(0.5 * log_var) * eps


def check_range(config, spec):
    """The decoder's output activation must cover the normalization target range."""
    if tuple(spec.target) != config.target_range:
        raise ConfigError(f"{config.output_activation} output needs target range "
                          f"{config.target_range}, normalization uses {tuple(spec.target)}")
