"""Desk-scale convolutional patch encoder and the NCRF/baseline grid model.

Each p x p patch goes through ``conv3x3 -> relu -> maxpool2`` blocks (the last
block without pooling), then global average pooling; the pooled activations
are the patch embedding and an affine head turns them into two logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import crf
from . import numerics as nx
from .numerics import ContractError, Tensor

CRF_WEIGHT = "crf.w"


def normalize_pixels(raw) -> np.ndarray:
    """Map 8-bit intensities to ``(v - 128) / 128``."""
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ContractError("pixel values must lie in [0, 255]")
    return ((raw.astype(nx.get_dtype()) - 128) / 128).astype(nx.get_dtype())


@dataclass(frozen=True)
class Architecture:
    g: int = 3
    patch: int = 32
    channels: tuple = (8, 16, 32)
    crf_enabled: bool = True
    compat: str = "equal"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        n_pools = len(self.channels) - 1
        if self.patch % (2**n_pools):
            raise ContractError(f"patch size {self.patch} must be divisible by {2**n_pools}")
        if self.compat not in crf.COMPATIBILITIES:
            raise ContractError(f"unknown compatibility {self.compat!r}")
        crf.GridSpec(self.g)

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]

    @property
    def n_sites(self) -> int:
        return self.g * self.g

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        c_in = 1
        for k, c_out in enumerate(self.channels, start=1):
            shapes[f"conv{k}.weight"] = (c_out, c_in, 3, 3)
            shapes[f"conv{k}.bias"] = (c_out,)
            c_in = c_out
        shapes["head.weight"] = (crf.N_LABELS, self.embedding_dim)
        shapes["head.bias"] = (crf.N_LABELS,)
        if self.crf_enabled:
            shapes[CRF_WEIGHT] = (crf.GridSpec(self.g).n_pairs,)
        return shapes

    def to_dict(self) -> dict:
        return {"g": self.g, "patch": self.patch, "channels": list(self.channels),
                "crf_enabled": self.crf_enabled, "compat": self.compat}


@dataclass
class ExtractorParams:
    arch: Architecture
    tensors: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, arch: Architecture, seed: int = 0) -> "ExtractorParams":
        """Uniform(-s, s) with s = 1/sqrt(fan_in); CRF weights start at zero."""
        rng = np.random.default_rng(seed)
        tensors = {}
        fan_in = 1
        for name, shape in arch.param_shapes().items():
            if name == CRF_WEIGHT:
                data = np.zeros(shape)
            else:
                if name.endswith(".weight"):
                    fan_in = int(np.prod(shape[1:]))
                s = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-s, s, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(arch, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self, freeze_crf: bool = False) -> list[Tensor]:
        return [t for n, t in self.tensors.items() if not (freeze_crf and n == CRF_WEIGHT)]

    def copy(self) -> "ExtractorParams":
        return ExtractorParams(self.arch, {n: Tensor(t.data.copy(), requires_grad=True, name=n)
                                           for n, t in self.tensors.items()})


def embed_patch(patch, params: ExtractorParams) -> Tensor:
    """Embed one [1, p, p] patch, or a batch [B, 1, p, p], into d-dimensional vectors."""
    x = nx.as_tensor(patch)
    single = x.ndim == 3
    if single:
        x = nx.reshape(x, (1,) + x.shape)
    p = params.arch.patch
    if x.ndim != 4 or x.shape[1:] != (1, p, p):
        raise ContractError(f"expected patches of shape [1, {p}, {p}], got {x.shape}")
    n_blocks = len(params.arch.channels)
    for k in range(1, n_blocks + 1):
        x = nx.relu(nx.conv2d(x, params[f"conv{k}.weight"], params[f"conv{k}.bias"], stride=1, pad=1))
        if k < n_blocks:
            x = nx.maxpool2(x)
    emb = nx.global_avg_pool(x)
    return nx.reshape(emb, (emb.shape[1],)) if single else emb


def unary_logits(embedding, params: ExtractorParams) -> Tensor:
    """Two logits per embedding; the unary cost handed to the CRF is their negation."""
    return nx.linear(embedding, params["head.weight"], params["head.bias"])


def split_grid(pixels: np.ndarray, g: int, p: int) -> np.ndarray:
    """[B, g*p, g*p] -> [B*g*g, 1, p, p] in raster (row-major) patch order."""
    pixels = np.asarray(pixels)
    B = pixels.shape[0]
    if pixels.shape[1:] != (g * p, g * p):
        raise ContractError(f"super-patch side must be {g * p}, got {pixels.shape[1:]}")
    return pixels.reshape(B, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(B * g * g, 1, p, p)


def forward_grid(pixels, params: ExtractorParams) -> tuple[Tensor, Tensor]:
    """Normalised super-patches [B, g*p, g*p] (or one [g*p, g*p]) -> (embeddings, psi_u).

    Embeddings are [B, N, d] and unary costs [B, N, 2] (unbatched input drops
    the leading axis).
    """
    data = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels, dtype=nx.get_dtype())
    single = data.ndim == 2
    if single:
        data = data[None]
    g, p = params.arch.g, params.arch.patch
    patches = split_grid(data, g, p)
    emb = embed_patch(Tensor(patches, dtype=data.dtype), params)
    logits = unary_logits(emb, params)
    B, N = data.shape[0], g * g
    emb = nx.reshape(emb, (B, N, emb.shape[-1]))
    psi_u = nx.neg(nx.reshape(logits, (B, N, crf.N_LABELS)))
    if single:
        emb = nx.reshape(emb, emb.shape[1:])
        psi_u = nx.reshape(psi_u, psi_u.shape[1:])
    return emb, psi_u


def predict_marginals(pixels, params: ExtractorParams, T: int = 10, crf_enabled: Optional[bool] = None) -> Tensor:
    """Per-patch tumor/normal marginals: mean-field output in NCRF mode, softmax otherwise."""
    use_crf = params.arch.crf_enabled if crf_enabled is None else crf_enabled
    if use_crf and CRF_WEIGHT not in params.tensors:
        raise ContractError("CRF inference requested but the parameters carry no CRF weights")
    emb, psi_u = forward_grid(pixels, params)
    if not use_crf:
        return nx.softmax(nx.neg(psi_u))
    d = crf.pairwise_distances(emb, params[CRF_WEIGHT])
    return crf.mean_field(psi_u, d, T=T, compat=params.arch.compat)


def grid_loss(pixels, labels, params: ExtractorParams, T: int = 10) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy over all patches of all super-patches, plus the marginals."""
    q = predict_marginals(pixels, params, T=T)
    return crf.crf_loss(q, labels), q
