"""Variational-autoencoder latent codec for temporally coherent mesh + texture sequences."""

from .asset_io import MeshFrame, SequenceManifest, TextureFrame, load_manifest, parse_obj, write_obj
from .codec import EncodedSequence, compression_stats, decode_sequence, encode_sequence
from .normalize import NormalizationSpec
from .vae import ModelConfig, VaeModel, build_joint_vae, build_mesh_vae, build_texture_vae

__version__ = "0.1.0"
