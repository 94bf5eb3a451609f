"""Cross-modal co-attention between the sketch and photo node sets.

Each branch aggregates the other branch's nodes through a scaled softmax over
a bilinear affinity matrix, then mixes the aggregate back in through a
sigmoid gate, a ReLU transform and a residual connection.
"""

from __future__ import annotations

import math

from . import autodiff as ad
from .autodiff import Tensor
from .hierarchy import FeatureSet
from .params import ParamStore


def affinity(S: Tensor, P: Tensor, params: ParamStore) -> Tensor:
    """``(S W_S)(P W_P)^T``, shape ``N_S x N_P``."""
    if S.shape[0] < 1 or P.shape[0] < 1:
        raise ValueError("affinity needs two non-empty node sets")
    s_proj = ad.matmul(S, params["coattn.W_S"])
    p_proj = ad.matmul(P, params["coattn.W_P"])
    return ad.matmul(s_proj, ad.transpose(p_proj))


def attention_weights(A: Tensor, d_h: int) -> tuple[Tensor, Tensor]:
    """Row-stochastic weights ``(A*_S, A*_P)``: sketch-over-photo-region and photo-over-stroke."""
    scale = 1.0 / math.sqrt(d_h)
    a_s = ad.softmax_rows(ad.scalar_mul(ad.transpose(A), scale))  # N_P x N_S
    a_p = ad.softmax_rows(ad.scalar_mul(A, scale))                # N_S x N_P
    return a_s, a_p


def aggregate(S: Tensor, P: Tensor, A: Tensor, d_h: int) -> tuple[Tensor, Tensor]:
    """Returns ``(S_to_P, P_to_S)``: sketch features pooled per photo node and vice versa."""
    a_s, a_p = attention_weights(A, d_h)
    return ad.matmul(a_s, S), ad.matmul(a_p, P)


def _gated(own: Tensor, other: Tensor, W_G: Tensor, Z_W: Tensor, Z_b: Tensor) -> Tensor:
    gate = ad.sigmoid(ad.matmul(ad.concat_last_dim(own, other), W_G))
    mixed = ad.hadamard(gate, ad.add(own, other))
    return ad.add(ad.relu(ad.add(ad.matmul(mixed, Z_W), Z_b)), own)


def gated_fuse(S: Tensor, P: Tensor, S_to_P: Tensor, P_to_S: Tensor,
               params: ParamStore) -> tuple[Tensor, Tensor]:
    """Gate each branch's aggregate into it and add the original features back."""
    if P_to_S.shape != S.shape or S_to_P.shape != P.shape:
        raise ValueError("aggregated features must match the branch they are fused into")
    s_out = _gated(S, P_to_S, params["coattn.W_GS"], params["coattn.Z_S.W"], params["coattn.Z_S.b"])
    p_out = _gated(P, S_to_P, params["coattn.W_GP"], params["coattn.Z_P.W"], params["coattn.Z_P.b"])
    return s_out, p_out


def gate_values(S: Tensor, P_to_S: Tensor, params: ParamStore, branch: str = "sketch") -> Tensor:
    key = "coattn.W_GS" if branch == "sketch" else "coattn.W_GP"
    return ad.sigmoid(ad.matmul(ad.concat_last_dim(S, P_to_S), params[key]))


def coattend(S: FeatureSet, P: FeatureSet, params: ParamStore,
             enabled: bool = True) -> tuple[FeatureSet, FeatureSet]:
    """Enrich both branches with each other; node counts and ids are untouched."""
    if not enabled:
        return S, P
    A = affinity(S.nodes, P.nodes, params)
    d_h = params["coattn.W_S"].shape[1]
    s_to_p, p_to_s = aggregate(S.nodes, P.nodes, A, d_h)
    s_new, p_new = gated_fuse(S.nodes, P.nodes, s_to_p, p_to_s, params)
    return S.with_nodes(s_new), P.with_nodes(p_new)
