"""Model persistence: versioned binary parameter file + readable manifest.

Layout: magic "PSVM", u16 version, seven u32 dims (frame, hop, n_mels,
conv1 channels, conv2 channels, attention dim, embedding dim), then every
parameter tensor as little-endian float32 in ModelParams.tensors() order.
"""

from __future__ import annotations

import configparser
import hashlib
import struct
from pathlib import Path

import numpy as np

from .net import ModelParams

MAGIC = b"PSVM"
VERSION = 1
_HEADER = struct.Struct("<4sH7I")


class ModelFormatError(Exception):
    """Raised when a model file is not a readable parameter dump."""


def _shapes(frame, hop, n_mels, c1, c2, attn_dim, emb_dim):
    feat = c2 * n_mels
    return [
        (c1, 1, 3, 3),
        (c1,),
        (c2, c1, 3, 3),
        (c2,),
        (attn_dim, feat),
        (attn_dim,),
        (attn_dim,),
        (emb_dim, 2 * feat),
        (emb_dim,),
    ]


def save_model(path, params: ModelParams) -> None:
    params.validate()
    path = Path(path)
    c1 = params.conv1_w.shape[0]
    c2 = params.conv2_w.shape[0]
    attn_dim = params.attn_v.shape[0]
    dims = (params.frame, params.hop, params.n_mels, c1, c2, attn_dim, params.emb_dim)
    blob = bytearray(_HEADER.pack(MAGIC, VERSION, *dims))
    for t in params.tensors():
        blob += np.ascontiguousarray(t, dtype="<f4").tobytes()
    path.write_bytes(blob)

    manifest = configparser.ConfigParser()
    manifest["model"] = {
        "version": str(VERSION),
        "frame": str(params.frame),
        "hop": str(params.hop),
        "n_mels": str(params.n_mels),
        "conv_channels": f"{c1} {c2}",
        "attn_dim": str(attn_dim),
        "emb_dim": str(params.emb_dim),
        "n_parameters": str(sum(t.size for t in params.tensors())),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(path.with_suffix(path.suffix + ".manifest.ini"), "w") as fh:
        manifest.write(fh)


def load_model(path) -> ModelParams:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise ModelFormatError(f"{path}: truncated header")
    magic, version, *dims = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    frame, hop, n_mels, c1, c2, attn_dim, emb_dim = dims
    shapes = _shapes(frame, hop, n_mels, c1, c2, attn_dim, emb_dim)
    offset = _HEADER.size
    tensors = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise ModelFormatError(f"{path}: truncated parameter data")
        tensors.append(
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset = end
    if offset != len(blob):
        raise ModelFormatError(f"{path}: {len(blob) - offset} trailing bytes")
    params = ModelParams(*tensors, frame=frame, hop=hop, n_mels=n_mels)
    params.validate()
    return params


def model_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
