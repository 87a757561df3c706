"""Cross-modality interaction blocks.

AsymmetricAttention (AAB) lets clinical features build an N x N attention map
that re-mixes dermoscopy values; only the dermoscopy path is refined.
BidirectionalAttention (BAB) runs that computation in both directions with
independent parameters. ConcatFusion (CAT) has no interaction at all.

Feature maps are channel-last, (..., H, W, C), N = H * W.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError


@dataclass
class Projection:
    """A 1x1 convolution C_in -> C_out."""

    weight: T.Tensor
    bias: T.Tensor

    @classmethod
    def init(cls, c_in, c_out, rng=None, zero=False):
        if zero or rng is None:
            w = np.zeros((c_in, c_out))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_in, c_out))
        return cls(T.Tensor(w, requires_grad=True), T.Tensor(np.zeros(c_out), requires_grad=True))

    @classmethod
    def identity(cls, c):
        return cls(T.Tensor(np.eye(c), requires_grad=True), T.Tensor(np.zeros(c), requires_grad=True))

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)

    def tensors(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class AttentionState:
    """Row-stochastic attention map, shape (..., N, N)."""

    attention: np.ndarray


def _check_pair(clin, derm):
    if clin.shape != derm.shape:
        for axis, (a, b) in enumerate(zip(clin.shape, derm.shape)):
            if a != b:
                raise DimensionError(
                    f"clinical and dermoscopy features differ on axis {axis}: {a} vs {b} "
                    f"(shapes {clin.shape} and {derm.shape})"
                )
        raise DimensionError(f"clinical/dermoscopy rank mismatch: {clin.shape} vs {derm.shape}")
    if len(clin.shape) < 3:
        raise DimensionError("attention blocks expect (..., H, W, C) feature maps")


@dataclass
class AttentionBlockParams:
    proj_k: Projection
    proj_q: Projection
    proj_v: Projection
    channels: int
    scaled: bool = False

    @classmethod
    def init(cls, channels, rng=None, zero_value=False, scaled=False):
        return cls(
            proj_k=Projection.init(channels, channels, rng),
            proj_q=Projection.init(channels, channels, rng),
            proj_v=Projection.init(channels, channels, rng, zero=zero_value),
            channels=channels,
            scaled=scaled,
        )

    def tensors(self):
        out = {}
        for name in ("proj_k", "proj_q", "proj_v"):
            for k, v in getattr(self, name).tensors().items():
                out[f"{name}.{k}"] = v
        return out


def aab_forward(clin, derm, params):
    """Refine ``derm`` with an attention map computed from ``clin``.

    refined = reshape(softmax(Q K^T) @ V) + derm, with Q, K projected from the
    clinical map and V from the dermoscopy map. Returns (refined, AttentionState).
    """
    clin, derm = T._wrap(clin), T._wrap(derm)
    _check_pair(clin, derm)
    if clin.shape[-1] != params.channels:
        raise DimensionError(f"channel axis has {clin.shape[-1]} entries, block expects C={params.channels}")
    keys = T.flatten_spatial(params.proj_k(clin))
    queries = T.flatten_spatial(params.proj_q(clin))
    values = T.flatten_spatial(params.proj_v(derm))
    logits = T.matmul(queries, T.transpose_last(keys))
    if params.scaled:
        logits = T.scale(logits, 1.0 / np.sqrt(params.channels))
    attn = T.softmax(logits)
    mixed = T.reshape(T.matmul(attn, values), derm.shape)
    return T.add(mixed, derm), AttentionState(attn.data)


@dataclass
class BabParams:
    clin_to_derm: AttentionBlockParams
    derm_to_clin: AttentionBlockParams

    @classmethod
    def init(cls, channels, rng=None, zero_value=False, scaled=False, channels_clin=None):
        return cls(
            clin_to_derm=AttentionBlockParams.init(channels, rng, zero_value, scaled),
            derm_to_clin=AttentionBlockParams.init(channels_clin or channels, rng, zero_value, scaled),
        )

    def tensors(self):
        out = {}
        for name in ("clin_to_derm", "derm_to_clin"):
            for k, v in getattr(self, name).tensors().items():
                out[f"{name}.{k}"] = v
        return out


def bab_forward(clin, derm, params, clin_guide=None, derm_guide=None):
    """Mutual enhancement: returns (refined_clin, refined_derm).

    Each direction is an independent :func:`aab_forward`. ``clin_guide`` and
    ``derm_guide`` are optional pre-aligned versions of the opposite modality
    (used when the two backbones emit different shapes); by default the raw
    inputs are used and must share a shape.
    """
    clin_guide = clin if clin_guide is None else clin_guide
    derm_guide = derm if derm_guide is None else derm_guide
    refined_derm, s1 = aab_forward(clin_guide, derm, params.clin_to_derm)
    refined_clin, s2 = aab_forward(derm_guide, clin, params.derm_to_clin)
    return refined_clin, refined_derm, (s1, s2)


def cat_fuse(emb_c, emb_d):
    """Concatenate two embeddings along the channel axis."""
    if emb_c is None or np.size(getattr(emb_c, "data", emb_c)) == 0:
        return emb_d
    if emb_d is None or np.size(getattr(emb_d, "data", emb_d)) == 0:
        return emb_c
    return T.concat([emb_c, emb_d], axis=-1)


class ConcatFusion:
    """Marker for the CAT block: no learnable parameters."""

    def tensors(self):
        return {}


def block_param_count(block):
    """Exact number of learnable scalar entries in a block."""
    return int(sum(t.size for t in block.tensors().values()))


def aab_param_formula(c):
    return 3 * (c * c + c)


def bab_param_formula(c):
    return 6 * (c * c + c)
