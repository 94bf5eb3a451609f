"""End-to-end paired embedding and the paired triplet loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coattention import coattend
from .hierarchy import (
    FeatureSet,
    GumbelConfig,
    HierarchyTrace,
    TraceEntry,
    TraceError,
    explicit_step,
    step,
    validate_merge_tree,
)
from .params import ParamStore


@dataclass
class ModelConfig:
    d: int = 512
    d_h: int = 64
    tau: float = 1.0
    margin: float = 0.5
    no_coattn: bool = False
    no_hierarchy: bool = False
    explicit_hierarchy: bool = False

    def __post_init__(self):
        if self.d <= 0 or self.d_h <= 0:
            raise ValueError("d and d_h must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class PairEmbedding:
    """Final ``1 x d`` vectors of both branches plus the merges that produced them."""

    sketch_final: Tensor
    photo_final: Tensor
    sketch_trace: HierarchyTrace = field(default_factory=HierarchyTrace)
    photo_trace: HierarchyTrace = field(default_factory=HierarchyTrace)
    levels: int = 0

    @property
    def steps(self) -> int:
        return len(self.sketch_trace) + len(self.photo_trace)

    def distance(self) -> Tensor:
        return ad.sq_euclidean(self.sketch_final, self.photo_final)


def project(regions, params: ParamStore) -> Tensor:
    """Affine map of every region row to ``d`` dimensions."""
    x = _as_regions(regions)
    return ad.add(ad.matmul(x, params["proj.W"]), params["proj.b"])


def _as_regions(regions) -> Tensor:
    arr = regions if isinstance(regions, Tensor) else np.asarray(regions, dtype=np.float64)
    if isinstance(arr, np.ndarray) and (arr.ndim != 2 or arr.shape[0] == 0):
        raise ValueError("empty region set")
    return arr if isinstance(arr, Tensor) else Tensor(arr)


def _check_trace(trace: "HierarchyTrace | None", n: int, branch: str) -> list[TraceEntry]:
    if trace is None:
        raise TraceError(f"explicit hierarchy mode needs a {branch} trace")
    entries = [e for e in trace if e.branch == branch]
    validate_merge_tree(entries, list(range(n)))
    return entries


class _Brancher:
    """Advances one branch by a level, either by sampling or by replaying a trace."""

    def __init__(self, branch: str, n: int, cfg: ModelConfig, gumbel: GumbelConfig,
                 rng, trace: "HierarchyTrace | None", keep_soft: bool):
        self.branch = branch
        self.gumbel = gumbel
        self.rng = rng
        self.keep_soft = keep_soft
        self.explicit = cfg.explicit_hierarchy
        self.script = _check_trace(trace, n, branch) if self.explicit else None
        self.trace = HierarchyTrace()

    def advance(self, X: FeatureSet, params: ParamStore, level: int) -> FeatureSet:
        if self.explicit:
            rec = self.script[len(self.trace)]
            X_next = explicit_step(X, rec, params)
            self.trace.append(TraceEntry(level, self.branch, rec.a_id, rec.b_id, rec.new_id,
                                         X.node_ids.index(rec.a_id), X.node_ids.index(rec.b_id)))
            return X_next
        X_next, entry = step(X, self.gumbel, params, self.rng, level, self.keep_soft)
        self.trace.append(entry)
        return X_next


def embed_pair(sketch_regions, photo_regions, params: ParamStore, cfg: ModelConfig,
               gumbel: "GumbelConfig | None" = None, rng: "np.random.Generator | None" = None,
               sketch_trace: "HierarchyTrace | None" = None,
               photo_trace: "HierarchyTrace | None" = None,
               keep_soft: bool = False) -> PairEmbedding:
    """Jointly embed one sketch and one photo.

    Co-attention runs at every level, including the last one; after it each
    branch that still has two or more nodes takes one hierarchy step.  A
    branch that is already down to one node keeps taking part in
    co-attention but does not fuse.
    """
    gumbel = gumbel or GumbelConfig(tau=cfg.tau, mode="greedy")
    if gumbel.mode == "sample" and rng is None:
        rng = gumbel.make_rng()
    S = FeatureSet.from_tensor(project(_as_regions(sketch_regions), params), "sketch")
    P = FeatureSet.from_tensor(project(_as_regions(photo_regions), params), "photo")

    if cfg.no_hierarchy:
        S, P = coattend(S, P, params, enabled=not cfg.no_coattn)
        return PairEmbedding(ad.mean_rows(S.nodes), ad.mean_rows(P.nodes))

    s_br = _Brancher("sketch", S.n, cfg, gumbel, rng, sketch_trace, keep_soft)
    p_br = _Brancher("photo", P.n, cfg, gumbel, rng, photo_trace, keep_soft)
    level = 0
    while True:
        S, P = coattend(S, P, params, enabled=not cfg.no_coattn)
        if S.n == 1 and P.n == 1:
            break
        if S.n > 1:
            S = s_br.advance(S, params, level)
        if P.n > 1:
            P = p_br.advance(P, params, level)
        level += 1
    return PairEmbedding(S.nodes, P.nodes, s_br.trace, p_br.trace, level)


def embed_single(regions, params: ParamStore, cfg: ModelConfig,
                 gumbel: "GumbelConfig | None" = None, rng: "np.random.Generator | None" = None,
                 trace: "HierarchyTrace | None" = None, branch: str = "sketch",
                 keep_soft: bool = False) -> tuple[Tensor, HierarchyTrace]:
    """Embed one item without a partner: the hierarchy loop with co-attention switched off."""
    gumbel = gumbel or GumbelConfig(tau=cfg.tau, mode="greedy")
    if gumbel.mode == "sample" and rng is None:
        rng = gumbel.make_rng()
    X = FeatureSet.from_tensor(project(_as_regions(regions), params), branch)
    if cfg.no_hierarchy:
        return ad.mean_rows(X.nodes), HierarchyTrace()
    br = _Brancher(branch, X.n, cfg, gumbel, rng, trace, keep_soft)
    level = 0
    while X.n > 1:
        X = br.advance(X, params, level)
        level += 1
    return X.nodes, br.trace


def triplet_loss(e_pos: PairEmbedding, e_neg: PairEmbedding, margin: float) -> Tensor:
    """``max(0, margin + D(S+, P+) - D(S-, P-))`` with ``D`` the squared distance."""
    return hinge(e_pos.distance(), e_neg.distance(), margin)


def hinge(d_pos: Tensor, d_neg: Tensor, margin: float) -> Tensor:
    return ad.relu(ad.add(ad.sub(d_pos, d_neg), Tensor(float(margin))))
