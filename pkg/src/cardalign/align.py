"""Cross-modal alignment: projection heads, InfoNCE, dual-phase combination.

Similarity is cosine (dot product of L2-normalized projections). The
directional loss for a batch of matched rows is

    L(a->b) = -(1/N) sum_i log[ exp(sim(z_i^a, z_i^b)/tau)
                                / sum_k exp(sim(z_i^a, z_k^b)/tau) ]

computed with log-sum-exp stabilization. The dual-phase objective is the
mean of the ECG->ED, ECG->ES, and ED->ES terms; the volume encoders stay
frozen throughout alignment, so the ED->ES term trains only the two volume
projection heads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cardalign import tensor as T


@dataclass(frozen=True)
class Embedding:
    """Latent vector tagged with its source modality and projection state."""

    vector: np.ndarray
    modality: str  # "ecg", "cmr_ed", "cmr_es"
    projected: bool = False  # False: raw encoder output; True: unit-norm 128-d


class ProjectionHead:
    """Two affine layers with a GELU between, output L2-normalized.

    Maps encoder outputs into the shared contrastive space (default 128-d).
    """

    def __init__(self, input_dim: int, rng: np.random.Generator,
                 hidden_dim: int = 512, output_dim: int = 128, dtype=None):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.dtype = dtype or T.get_default_dtype()
        self.params = {
            "fc1.w": T.Tensor(rng.normal(0, input_dim**-0.5, (input_dim, hidden_dim)), True, self.dtype),
            "fc1.b": T.Tensor(np.zeros(hidden_dim), True, self.dtype),
            "fc2.w": T.Tensor(rng.normal(0, hidden_dim**-0.5, (hidden_dim, output_dim)), True, self.dtype),
            "fc2.b": T.Tensor(np.zeros(output_dim), True, self.dtype),
        }

    def project(self, x: T.Tensor | np.ndarray) -> T.Tensor:
        """(B, input_dim) -> (B, output_dim) rows of unit L2 norm."""
        x = T.as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise T.ShapeError("project", f"input width {x.shape[-1]} != head width {self.input_dim}")
        h = T.gelu(T.linear(x, self.params["fc1.w"], self.params["fc1.b"]))
        h = T.linear(h, self.params["fc2.w"], self.params["fc2.b"])
        norms = np.sqrt((h.data * h.data).sum(axis=-1))
        if np.any(norms < 1e-12):
            raise ValueError("projection collapsed to the zero vector; cannot normalize")
        return T.l2_normalize(h)

    def project_embedding(self, emb: Embedding) -> Embedding:
        out = self.project(T.constant(emb.vector[None], dtype=self.dtype))
        return Embedding(out.data[0], emb.modality, projected=True)


@dataclass
class AlignBatch:
    """Projected, row-matched embeddings of one batch for all three streams."""

    z_ecg: T.Tensor
    z_ed: T.Tensor
    z_es: T.Tensor
    tau: float

    def __post_init__(self):
        n = self.z_ecg.shape[0]
        if self.z_ed.shape[0] != n or self.z_es.shape[0] != n:
            raise T.ShapeError("align_batch", "all three blocks must have identical row counts")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


def info_nce(za: T.Tensor | np.ndarray, zb: T.Tensor | np.ndarray, tau) -> T.Tensor:
    """Directional InfoNCE over L2-normalized rows (denominator varies zb).

    `tau` is a positive float, or a scalar tensor in learnable-temperature
    mode (optimized in log-space by the caller, hence positive by
    construction).
    """
    if isinstance(tau, T.Tensor):
        inv_tau = T.div(T.constant(np.ones(())), tau)
    else:
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        inv_tau = 1.0 / tau
    za, zb = T.as_tensor(za), T.as_tensor(zb)
    if za.shape != zb.shape:
        raise T.ShapeError("info_nce", f"blocks differ in shape: {za.shape} vs {zb.shape}")
    n = za.shape[0]
    sims = T.mul(T.matmul(za, T.transpose(zb, (1, 0))), inv_tau)  # (N, N)
    lse = T.logsumexp(sims, axis=1)
    eye = T.constant(np.eye(n, dtype=za.dtype))
    diag = T.reduce_sum(T.mul(sims, eye), axis=1)
    return T.reduce_mean(T.sub(lse, diag))


def dual_phase_terms(batch: AlignBatch) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    return (
        info_nce(batch.z_ecg, batch.z_ed, batch.tau),
        info_nce(batch.z_ecg, batch.z_es, batch.tau),
        info_nce(batch.z_ed, batch.z_es, batch.tau),
    )


def dual_phase_loss(batch: AlignBatch, symmetric: bool = False) -> T.Tensor:
    """Mean of the three directional terms (optionally symmetrized)."""
    t1, t2, t3 = dual_phase_terms(batch)
    total = T.mul(T.add(T.add(t1, t2), t3), 1.0 / 3.0)
    if symmetric:
        r1 = info_nce(batch.z_ed, batch.z_ecg, batch.tau)
        r2 = info_nce(batch.z_es, batch.z_ecg, batch.tau)
        r3 = info_nce(batch.z_es, batch.z_ed, batch.tau)
        rev = T.mul(T.add(T.add(r1, r2), r3), 1.0 / 3.0)
        total = T.mul(T.add(total, rev), 0.5)
    return total


def info_nce_bruteforce(za: np.ndarray, zb: np.ndarray, tau: float) -> float:
    """Independent scalar evaluation of the contrastive definition.

    Plain python floats and loops; kept free of the tensor library so it can
    serve as an oracle for :func:`info_nce`.
    """
    import math

    n = len(za)
    total = 0.0
    for i in range(n):
        num = math.exp(sum(float(x) * float(y) for x, y in zip(za[i], zb[i])) / tau)
        den = 0.0
        for k in range(n):
            den += math.exp(sum(float(x) * float(y) for x, y in zip(za[i], zb[k])) / tau)
        total += math.log(num / den)
    return -total / n


def retrieval_topk(z_query: np.ndarray, z_gallery: np.ndarray, k: int) -> float:
    """Fraction of rows whose true match ranks in the top k by cosine."""
    n = z_query.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds gallery size {n}")
    q = z_query / np.linalg.norm(z_query, axis=1, keepdims=True)
    g = z_gallery / np.linalg.norm(z_gallery, axis=1, keepdims=True)
    sims = q @ g.T
    ranks = (sims >= sims[np.arange(n), np.arange(n)][:, None]).sum(axis=1)
    return float((ranks <= k).mean())
