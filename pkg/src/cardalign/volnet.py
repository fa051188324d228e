"""Phase-specific residual 3D convolutional encoders for cardiac volumes.

One encoder instance per cardiac phase; the two phases never share
parameters. The trunk is a reduced residual network (stem conv + pool, then
stages of pre-activation-style blocks with channel layer norm), global
average pooling, and a linear projection to the latent width. A linear
regression head on top provides the supervised phenotype objective.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from cardalign import tensor as T
from cardalign.cohort import CmrVolume, PHENOTYPE_FIELDS


@dataclass(frozen=True)
class CmrEncoderConfig:
    phase: str
    stage_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    embed_dim: int = 256
    stage_strides: tuple = ((1, 1, 1), (1, 2, 2), (2, 2, 2), (1, 2, 2))
    n_phenotypes: int = len(PHENOTYPE_FIELDS)

    def __post_init__(self):
        if self.phase not in ("ED", "ES"):
            raise ValueError(f"phase must be ED or ES, got {self.phase!r}")
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ValueError("stage_widths and blocks_per_stage lengths differ")
        if len(self.stage_widths) > len(self.stage_strides):
            raise ValueError("not enough stage strides for the requested stages")


class PhaseMismatchError(ValueError):
    pass


def _channel_norm(x: T.Tensor, gamma: T.Tensor, beta: T.Tensor) -> T.Tensor:
    # layer norm over the channel axis of (B, C, D, H, W)
    xt = T.transpose(x, (0, 2, 3, 4, 1))
    xt = T.layer_norm(xt, gamma, beta)
    return T.transpose(xt, (0, 4, 1, 2, 3))


class VolumeEncoder:
    """Residual 3D encoder mapping (B, 1, 6, H, W) volumes to embeddings."""

    def __init__(self, config: CmrEncoderConfig, rng: np.random.Generator, dtype=None):
        self.config = config
        self.dtype = dtype or T.get_default_dtype()
        p: dict[str, T.Tensor] = {}
        w0 = config.stage_widths[0]

        def conv_init(cout, cin, k):
            fan_in = cin * k * k * k
            return rng.normal(0.0, (2.0 / fan_in) ** 0.5, (cout, cin, k, k, k))

        p["stem.w"] = T.Tensor(conv_init(w0, 1, 3), True, self.dtype)
        p["stem.b"] = T.Tensor(np.zeros((1, w0, 1, 1, 1)), True, self.dtype)
        p["stem.ln.g"] = T.Tensor(np.ones(w0), True, self.dtype)
        p["stem.ln.b"] = T.Tensor(np.zeros(w0), True, self.dtype)
        cin = w0
        for si, (width, blocks) in enumerate(zip(config.stage_widths, config.blocks_per_stage)):
            for bi in range(blocks):
                pfx = f"s{si}b{bi}"
                stride = config.stage_strides[si] if bi == 0 else (1, 1, 1)
                p[f"{pfx}.conv1.w"] = T.Tensor(conv_init(width, cin, 3), True, self.dtype)
                p[f"{pfx}.conv1.b"] = T.Tensor(np.zeros((1, width, 1, 1, 1)), True, self.dtype)
                p[f"{pfx}.ln1.g"] = T.Tensor(np.ones(width), True, self.dtype)
                p[f"{pfx}.ln1.b"] = T.Tensor(np.zeros(width), True, self.dtype)
                p[f"{pfx}.conv2.w"] = T.Tensor(conv_init(width, width, 3), True, self.dtype)
                p[f"{pfx}.conv2.b"] = T.Tensor(np.zeros((1, width, 1, 1, 1)), True, self.dtype)
                p[f"{pfx}.ln2.g"] = T.Tensor(np.ones(width), True, self.dtype)
                p[f"{pfx}.ln2.b"] = T.Tensor(np.zeros(width), True, self.dtype)
                if stride != (1, 1, 1) or cin != width:
                    p[f"{pfx}.down.w"] = T.Tensor(conv_init(width, cin, 1), True, self.dtype)
                    p[f"{pfx}.down.b"] = T.Tensor(np.zeros((1, width, 1, 1, 1)), True, self.dtype)
                cin = width
        p["head.w"] = T.Tensor(rng.normal(0.0, cin**-0.5, (cin, config.embed_dim)), True, self.dtype)
        p["head.b"] = T.Tensor(np.zeros(config.embed_dim), True, self.dtype)
        p["reg.w"] = T.Tensor(
            rng.normal(0.0, config.embed_dim**-0.5, (config.embed_dim, config.n_phenotypes)),
            True, self.dtype,
        )
        p["reg.b"] = T.Tensor(np.zeros(config.n_phenotypes), True, self.dtype)
        self.params = p

    def _block(self, x: T.Tensor, pfx: str, stride) -> T.Tensor:
        p = self.params
        h = T.conv3d(x, p[f"{pfx}.conv1.w"], stride=stride, padding=1)
        h = T.add(h, p[f"{pfx}.conv1.b"])
        h = T.gelu(_channel_norm(h, p[f"{pfx}.ln1.g"], p[f"{pfx}.ln1.b"]))
        h = T.conv3d(h, p[f"{pfx}.conv2.w"], stride=1, padding=1)
        h = T.add(h, p[f"{pfx}.conv2.b"])
        h = _channel_norm(h, p[f"{pfx}.ln2.g"], p[f"{pfx}.ln2.b"])
        if f"{pfx}.down.w" in p:
            x = T.add(T.conv3d(x, p[f"{pfx}.down.w"], stride=stride, padding=0), p[f"{pfx}.down.b"])
        return T.gelu(T.add(h, x))

    def encode(self, volumes: T.Tensor | np.ndarray) -> T.Tensor:
        """Embed a batch of volumes: (B, 6, H, W) or (B, 1, 6, H, W) in,
        (B, embed_dim) out."""
        x = T.as_tensor(volumes)
        if x.ndim == 4:
            x = T.reshape(x, (x.shape[0], 1) + tuple(x.shape[1:]))
        p = self.params
        h = T.conv3d(x, p["stem.w"], stride=(1, 2, 2), padding=1)
        h = T.add(h, p["stem.b"])
        h = T.gelu(_channel_norm(h, p["stem.ln.g"], p["stem.ln.b"]))
        h = T.avg_pool3d(h, kernel=(1, 2, 2))
        for si, blocks in enumerate(self.config.blocks_per_stage):
            for bi in range(blocks):
                stride = self.config.stage_strides[si] if bi == 0 else (1, 1, 1)
                h = self._block(h, f"s{si}b{bi}", stride)
        pooled = T.reduce_mean(h, axis=(2, 3, 4))
        return T.linear(pooled, p["head.w"], p["head.b"])

    def regression_loss(self, embeddings: T.Tensor, std_targets: np.ndarray | T.Tensor) -> T.Tensor:
        """MSE of the linear phenotype head against standardized targets."""
        pred = T.linear(embeddings, self.params["reg.w"], self.params["reg.b"])
        return T.mse(pred, T.as_tensor(std_targets))

    def embed_volume(self, volume: CmrVolume) -> np.ndarray:
        return cmr_encode(volume, self).data[0]

    def trunk_param_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("reg.")]

    def checksum(self) -> str:
        """SHA-256 over all parameter bytes in name order (freeze contract)."""
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(self.params[name].data.tobytes())
        return digest.hexdigest()


def cmr_encode(volume: CmrVolume, encoder: VolumeEncoder) -> T.Tensor:
    """Embed one standardized volume, enforcing the phase contract."""
    if volume.phase != encoder.config.phase:
        raise PhaseMismatchError(
            f"volume phase {volume.phase} does not match encoder phase {encoder.config.phase}"
        )
    arr = np.asarray(volume.intensities, dtype=encoder.dtype)[None]
    return encoder.encode(T.constant(arr))
