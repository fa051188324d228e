"""ECG transformer encoder with masked-autoencoder pretraining.

Tokens are time patches spanning all 12 leads (patch_len samples each, so
5000/patch_len tokens of raw width 12*patch_len). The encoder follows the
standard pre-norm transformer block; pretraining masks a random token subset
and reconstructs the raw waveform with a lightweight decoder, with MSE taken
over masked positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cardalign import tensor as T
from cardalign.signals import EcgRecord, N_LEADS, N_SAMPLES


@dataclass(frozen=True)
class VitConfig:
    layers: int
    heads: int
    embed_dim: int
    patch_len: int = 25
    mask_ratio: float = 0.5
    pool: str = "mean"  # "mean" over tokens or "cls"
    decoder_dim: int = 0     # 0 -> embed_dim // 2
    decoder_layers: int = 1
    decoder_heads: int = 0   # 0 -> same as heads
    loss_on_all: bool = False  # include unmasked positions in the MSE
    n_samples: int = N_SAMPLES  # override only for reduced verification configs
    n_leads: int = N_LEADS

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.n_samples % self.patch_len != 0:
            raise ValueError(f"patch_len {self.patch_len} does not divide {self.n_samples}")
        if self.pool not in ("mean", "cls"):
            raise ValueError(f"pool must be 'mean' or 'cls', got {self.pool!r}")
        dd = self.dec_dim
        if dd % self.dec_heads != 0:
            raise ValueError(f"decoder_dim {dd} not divisible by decoder heads {self.dec_heads}")

    @property
    def token_count(self) -> int:
        return self.n_samples // self.patch_len

    @property
    def raw_dim(self) -> int:
        return self.n_leads * self.patch_len

    @property
    def dec_dim(self) -> int:
        return self.decoder_dim if self.decoder_dim > 0 else max(8, self.embed_dim // 2)

    @property
    def dec_heads(self) -> int:
        return self.decoder_heads if self.decoder_heads > 0 else self.heads


# capacity ladder: layers, heads, embedding size
PRESETS = {
    "tiny": VitConfig(layers=12, heads=3, embed_dim=192),
    "small": VitConfig(layers=12, heads=6, embed_dim=384),
    "medium": VitConfig(layers=12, heads=8, embed_dim=576),
    "base": VitConfig(layers=12, heads=12, embed_dim=768),
}


def patchify(leads: np.ndarray | EcgRecord, patch_len: int) -> np.ndarray:
    """Split a (12, 5000) recording into (tokens, 12*patch_len) time patches."""
    arr = leads.leads if isinstance(leads, EcgRecord) else np.asarray(leads)
    if arr.shape != (N_LEADS, N_SAMPLES):
        raise ValueError(f"expected (12, 5000) leads, got {arr.shape}")
    if N_SAMPLES % patch_len != 0:
        raise ValueError(f"patch_len {patch_len} does not divide {N_SAMPLES}")
    tokens = N_SAMPLES // patch_len
    return arr.reshape(N_LEADS, tokens, patch_len).transpose(1, 0, 2).reshape(tokens, N_LEADS * patch_len)


def unpatchify(tokens: np.ndarray, patch_len: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    count = tokens.shape[0]
    return tokens.reshape(count, N_LEADS, patch_len).transpose(1, 0, 2).reshape(N_LEADS, count * patch_len)


@dataclass(frozen=True)
class MaskPlan:
    """Reproducible token masking: (token_count, ratio, seed) -> indices."""

    token_count: int
    masked_indices: tuple
    seed: int

    def __post_init__(self):
        idx = self.masked_indices
        if list(idx) != sorted(set(idx)) or (idx and (idx[0] < 0 or idx[-1] >= self.token_count)):
            raise ValueError("masked_indices must be sorted, unique, and in range")

    @property
    def visible_indices(self) -> tuple:
        masked = set(self.masked_indices)
        return tuple(i for i in range(self.token_count) if i not in masked)


def build_mask_plan(token_count: int, mask_ratio: float, seed: int) -> MaskPlan:
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    n_masked = int(round(mask_ratio * token_count))
    n_masked = min(max(n_masked, 1), token_count - 1)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF]))
    perm = rng.permutation(token_count)
    return MaskPlan(token_count, tuple(sorted(int(i) for i in perm[:n_masked])), seed)


def count_params(config: VitConfig) -> int:
    """Trainable parameter count: encoder trunk + input projection + positions."""
    d = config.embed_dim
    n = config.raw_dim * d + d          # input projection
    n += d                              # cls token
    n += (config.token_count + 1) * d   # learned positions
    per_layer = (
        2 * d                # ln1
        + d * 3 * d + 3 * d  # qkv
        + d * d + d          # attn out proj
        + 2 * d              # ln2
        + d * 4 * d + 4 * d  # mlp fc1
        + 4 * d * d + d      # mlp fc2
    )
    n += config.layers * per_layer
    n += 2 * d                          # final norm
    return n


def _init_block(params: dict, prefix: str, d: int, rng, dtype) -> None:
    s = 0.02
    params[f"{prefix}.ln1.g"] = T.Tensor(np.ones(d), True, dtype)
    params[f"{prefix}.ln1.b"] = T.Tensor(np.zeros(d), True, dtype)
    params[f"{prefix}.qkv.w"] = T.Tensor(rng.normal(0, s, (d, 3 * d)), True, dtype)
    params[f"{prefix}.qkv.b"] = T.Tensor(np.zeros(3 * d), True, dtype)
    params[f"{prefix}.proj.w"] = T.Tensor(rng.normal(0, s, (d, d)), True, dtype)
    params[f"{prefix}.proj.b"] = T.Tensor(np.zeros(d), True, dtype)
    params[f"{prefix}.ln2.g"] = T.Tensor(np.ones(d), True, dtype)
    params[f"{prefix}.ln2.b"] = T.Tensor(np.zeros(d), True, dtype)
    params[f"{prefix}.fc1.w"] = T.Tensor(rng.normal(0, s, (d, 4 * d)), True, dtype)
    params[f"{prefix}.fc1.b"] = T.Tensor(np.zeros(4 * d), True, dtype)
    params[f"{prefix}.fc2.w"] = T.Tensor(rng.normal(0, s, (4 * d, d)), True, dtype)
    params[f"{prefix}.fc2.b"] = T.Tensor(np.zeros(d), True, dtype)


def _run_block(params: dict, prefix: str, x: T.Tensor, heads: int) -> T.Tensor:
    b, s, d = x.shape
    dh = d // heads
    h = T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    qkv = T.linear(h, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = T.reshape(qkv, (b, s, 3, heads, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, heads, S, dh)
    q = T.reshape(T.narrow(qkv, 0, 0, 1), (b, heads, s, dh))
    k = T.reshape(T.narrow(qkv, 0, 1, 1), (b, heads, s, dh))
    v = T.reshape(T.narrow(qkv, 0, 2, 1), (b, heads, s, dh))
    att = T.softmax(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)))
    ctx = T.transpose(T.matmul(att, v), (0, 2, 1, 3))
    ctx = T.reshape(ctx, (b, s, d))
    x = T.add(x, T.linear(ctx, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"]))
    h = T.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = T.gelu(T.linear(h, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    h = T.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])
    return T.add(x, h)


class EcgVit:
    """Transformer encoder over ECG time-patch tokens."""

    def __init__(self, config: VitConfig, rng: np.random.Generator, dtype=None):
        self.config = config
        self.dtype = dtype or T.get_default_dtype()
        d, raw, tokens = config.embed_dim, config.raw_dim, config.token_count
        s = 0.02
        p: dict[str, T.Tensor] = {}
        p["embed.w"] = T.Tensor(rng.normal(0, s, (raw, d)), True, self.dtype)
        p["embed.b"] = T.Tensor(np.zeros(d), True, self.dtype)
        p["cls"] = T.Tensor(rng.normal(0, s, (1, 1, d)), True, self.dtype)
        p["pos"] = T.Tensor(rng.normal(0, s, (1, tokens + 1, d)), True, self.dtype)
        for i in range(config.layers):
            _init_block(p, f"enc{i}", d, rng, self.dtype)
        p["norm.g"] = T.Tensor(np.ones(d), True, self.dtype)
        p["norm.b"] = T.Tensor(np.zeros(d), True, self.dtype)
        self.params = p

    def encoder_param_names(self) -> list[str]:
        return [k for k in self.params if not (k.startswith("dec") or k.startswith("out.") or k == "mask")]

    def _embed_visible(self, tokens: T.Tensor, visible_idx: np.ndarray | None) -> T.Tensor:
        """Project tokens, add positions, optionally keep only visible rows,
        and prepend the cls token."""
        p = self.params
        b = tokens.shape[0]
        x = T.linear(tokens, p["embed.w"], p["embed.b"])
        x = T.add(x, T.narrow(p["pos"], 1, 1, self.config.token_count))
        if visible_idx is not None:
            x = T.take_rows(x, visible_idx)
        cls = T.add(p["cls"], T.narrow(p["pos"], 1, 0, 1))
        cls = T.add(cls, T.constant(np.zeros((b, 1, self.config.embed_dim), dtype=self.dtype)))
        return T.concat([cls, x], axis=1)

    def encode_sequence(self, tokens: T.Tensor, visible_idx: np.ndarray | None = None) -> T.Tensor:
        """Full transformer stack; returns the normalized (B, S+1, d) sequence."""
        if tokens.shape[-1] != self.config.raw_dim:
            raise T.ShapeError("vit_encode", f"token width {tokens.shape[-1]} != {self.config.raw_dim}")
        x = self._embed_visible(tokens, visible_idx)
        for i in range(self.config.layers):
            x = _run_block(self.params, f"enc{i}", x, self.config.heads)
        return T.layer_norm(x, self.params["norm.g"], self.params["norm.b"])

    def encode(self, tokens: T.Tensor | np.ndarray) -> T.Tensor:
        """Pooled embedding (B, embed_dim) for a batch of full token grids."""
        tokens = T.as_tensor(tokens)
        if tokens.ndim == 2:
            tokens = T.reshape(tokens, (1,) + tuple(tokens.shape))
        seq = self.encode_sequence(tokens)
        if self.config.pool == "cls":
            pooled = T.narrow(seq, 1, 0, 1)
            return T.reshape(pooled, (seq.shape[0], self.config.embed_dim))
        body = T.narrow(seq, 1, 1, seq.shape[1] - 1)
        return T.reduce_mean(body, axis=1)

    def embed_record(self, record: EcgRecord) -> np.ndarray:
        tokens = patchify(record, self.config.patch_len)
        return self.encode(T.constant(tokens[None], dtype=self.dtype)).data[0]


class MaeModel(EcgVit):
    """Masked autoencoder: EcgVit encoder plus a small reconstruction decoder."""

    def __init__(self, config: VitConfig, rng: np.random.Generator, dtype=None):
        super().__init__(config, rng, dtype)
        d, dd, raw, tokens = config.embed_dim, config.dec_dim, config.raw_dim, config.token_count
        s = 0.02
        p = self.params
        p["dec_embed.w"] = T.Tensor(rng.normal(0, s, (d, dd)), True, self.dtype)
        p["dec_embed.b"] = T.Tensor(np.zeros(dd), True, self.dtype)
        p["mask"] = T.Tensor(rng.normal(0, s, (1, 1, dd)), True, self.dtype)
        p["dec_pos"] = T.Tensor(rng.normal(0, s, (1, tokens, dd)), True, self.dtype)
        for i in range(config.decoder_layers):
            _init_block(p, f"dec{i}", dd, rng, self.dtype)
        p["dec_norm.g"] = T.Tensor(np.ones(dd), True, self.dtype)
        p["dec_norm.b"] = T.Tensor(np.zeros(dd), True, self.dtype)
        p["out.w"] = T.Tensor(rng.normal(0, s, (dd, raw)), True, self.dtype)
        p["out.b"] = T.Tensor(np.zeros(raw), True, self.dtype)

    def masked_loss(self, tokens: np.ndarray, plans: list[MaskPlan]) -> tuple[T.Tensor, np.ndarray]:
        """Masked-reconstruction MSE for a batch of (B, T, raw) token grids.

        Returns the scalar loss tensor and the full reconstruction (B, T, raw)
        as a plain array for inspection.
        """
        cfg = self.config
        b, tok = tokens.shape[0], cfg.token_count
        vis_idx = np.stack([np.array(pl.visible_indices, dtype=np.int64) for pl in plans])
        mask_idx = np.stack([np.array(pl.masked_indices, dtype=np.int64) for pl in plans])
        n_masked = mask_idx.shape[1]
        tok_t = T.constant(np.asarray(tokens, dtype=self.dtype))
        seq = self.encode_sequence(tok_t, visible_idx=vis_idx)

        p = self.params
        y_vis = T.linear(T.narrow(seq, 1, 1, vis_idx.shape[1]), p["dec_embed.w"], p["dec_embed.b"])
        mask_tok = T.add(p["mask"], T.constant(np.zeros((b, n_masked, cfg.dec_dim), dtype=self.dtype)))
        shuffled = T.concat([y_vis, mask_tok], axis=1)
        order = np.concatenate([vis_idx, mask_idx], axis=1)
        restore = np.argsort(order, axis=1)
        full = T.take_rows(shuffled, restore)
        full = T.add(full, p["dec_pos"])
        for i in range(cfg.decoder_layers):
            full = _run_block(p, f"dec{i}", full, cfg.dec_heads)
        full = T.layer_norm(full, p["dec_norm.g"], p["dec_norm.b"])
        recon = T.linear(full, p["out.w"], p["out.b"])

        if cfg.loss_on_all:
            loss = T.mse(recon, tok_t)
        else:
            mask01 = np.zeros((b, tok), dtype=self.dtype)
            np.put_along_axis(mask01, mask_idx, 1.0, axis=1)
            diff = T.sub(recon, tok_t)
            per_token = T.reduce_mean(T.mul(diff, diff), axis=2)
            masked_sum = T.reduce_sum(T.mul(per_token, T.constant(mask01)))
            loss = T.mul(masked_sum, 1.0 / (b * n_masked))
        return loss, recon.data

    def reconstruct(self, record: EcgRecord | np.ndarray, seed: int) -> tuple[float, np.ndarray]:
        """One masked-reconstruction pass on a single record.

        Returns (masked MSE, reconstructed 12x5000 waveform).
        """
        leads = record.leads if isinstance(record, EcgRecord) else np.asarray(record)
        tokens = patchify(leads, self.config.patch_len)[None]
        plan = build_mask_plan(self.config.token_count, self.config.mask_ratio, seed)
        loss, recon = self.masked_loss(tokens, [plan])
        return float(loss.data), unpatchify(recon[0], self.config.patch_len)


def batch_plans(config: VitConfig, seed: int, batch_size: int) -> list[MaskPlan]:
    """Per-sample mask plans derived from (seed, row index)."""
    return [
        build_mask_plan(config.token_count, config.mask_ratio,
                        int(np.random.SeedSequence([int(seed), row]).generate_state(1)[0]))
        for row in range(batch_size)
    ]
