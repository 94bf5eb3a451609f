"""Pairwise hierarchical node merging with a straight-through Gumbel-softmax choice.

At each level every unordered node pair is scored by the Gram matrix of the
projected nodes, one pair is chosen with a Gumbel-softmax sample that is
discretised in the forward pass, and the pair is fused into a single node.
A set of ``N`` nodes reaches one node after exactly ``N - 1`` steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore

BRANCHES = ("sketch", "photo")


class TraceError(ValueError):
    """A hierarchy trace is inconsistent with the node set it is applied to."""


@dataclass
class FeatureSet:
    """One hierarchy level of one branch: ``N x d`` nodes with stable ids."""

    nodes: Tensor
    node_ids: list[int]
    branch: str = "sketch"
    next_id: int = -1

    def __post_init__(self):
        if self.nodes.data.ndim != 2:
            raise ValueError(f"FeatureSet nodes must be N x d, got {self.nodes.shape}")
        if len(self.node_ids) != self.nodes.shape[0]:
            raise ValueError("node_ids length does not match the number of nodes")
        if len(set(self.node_ids)) != len(self.node_ids):
            raise ValueError("node_ids must be unique")
        if self.branch not in BRANCHES:
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.next_id < 0:
            self.next_id = max(self.node_ids) + 1

    @classmethod
    def from_tensor(cls, nodes: Tensor, branch: str = "sketch") -> "FeatureSet":
        return cls(nodes, list(range(nodes.shape[0])), branch)

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def d(self) -> int:
        return self.nodes.shape[1]

    def with_nodes(self, nodes: Tensor) -> "FeatureSet":
        """Same identities, new node values (used after co-attention)."""
        if nodes.shape != self.nodes.shape:
            raise ValueError(f"node shape changed from {self.nodes.shape} to {nodes.shape}")
        return FeatureSet(nodes, list(self.node_ids), self.branch, self.next_id)


@dataclass
class GumbelConfig:
    """Temperature, noise seed, and selection behaviour for one evaluation.

    ``mode="greedy"`` drops the Gumbel noise.  ``estimator="soft"`` scales the
    fused node by the continuous weight of the chosen pair instead of the
    straight-through one-hot value; it exists for gradient checks.
    """

    tau: float = 1.0
    rng_seed: int = 0
    mode: str = "sample"
    estimator: str = "st"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.mode not in ("sample", "greedy"):
            raise ValueError(f"unknown Gumbel mode {self.mode!r}")
        if self.estimator not in ("st", "soft"):
            raise ValueError(f"unknown estimator {self.estimator!r}")

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


@dataclass
class TraceEntry:
    level: int
    branch: str
    a_id: int
    b_id: int
    new_id: int
    a: int = -1
    b: int = -1
    soft: "np.ndarray | None" = field(default=None, repr=False)


class HierarchyTrace:
    """Record of which node pair merged at each level, for one or both branches.

    Text form is one merge per line, ``level,branch,a_id,b_id,new_id``,
    preceded by that same string as a header.
    """

    HEADER = "level,branch,a_id,b_id,new_id"

    def __init__(self, entries: Iterable[TraceEntry] = ()):
        self.entries: list[TraceEntry] = list(entries)

    def append(self, entry: TraceEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def for_branch(self, branch: str) -> "HierarchyTrace":
        return HierarchyTrace(e for e in self.entries if e.branch == branch)

    def merged(self, other: "HierarchyTrace") -> "HierarchyTrace":
        return HierarchyTrace(sorted(self.entries + other.entries,
                                     key=lambda e: (e.level, BRANCHES.index(e.branch))))

    def to_text(self) -> str:
        rows = [self.HEADER]
        rows += [f"{e.level},{e.branch},{e.a_id},{e.b_id},{e.new_id}" for e in self.entries]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "HierarchyTrace":
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#") or line == cls.HEADER:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise TraceError(f"line {lineno}: expected 5 comma-separated fields")
            level, branch, a_id, b_id, new_id = parts
            if branch not in BRANCHES:
                raise TraceError(f"line {lineno}: unknown branch {branch!r}")
            try:
                entries.append(TraceEntry(int(level), branch, int(a_id), int(b_id), int(new_id)))
            except ValueError as exc:
                raise TraceError(f"line {lineno}: {exc}") from None
        return cls(entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HierarchyTrace):
            return NotImplemented
        key = lambda e: (e.level, e.branch, e.a_id, e.b_id, e.new_id)  # noqa: E731
        return [key(e) for e in self.entries] == [key(e) for e in other.entries]


def validate_merge_tree(entries: Sequence[TraceEntry], leaf_ids: Sequence[int]) -> None:
    """Raise TraceError unless ``entries`` reduce ``leaf_ids`` to one node by pairwise merges."""
    live = set(leaf_ids)
    seen = set(leaf_ids)
    if len(live) != len(leaf_ids):
        raise TraceError("duplicate leaf ids")
    if len(entries) != len(leaf_ids) - 1:
        raise TraceError(f"expected {len(leaf_ids) - 1} merges for {len(leaf_ids)} leaves, "
                         f"got {len(entries)}")
    for e in entries:
        if e.a_id == e.b_id:
            raise TraceError(f"level {e.level}: node {e.a_id} merged with itself")
        for nid in (e.a_id, e.b_id):
            if nid not in live:
                raise TraceError(f"level {e.level}: node {nid} is not available")
        if e.new_id in seen:
            raise TraceError(f"level {e.level}: id {e.new_id} is not fresh")
        live -= {e.a_id, e.b_id}
        live.add(e.new_id)
        seen.add(e.new_id)
    if len(live) != 1:
        raise TraceError("trace does not end in a single root")


def cluster_sets(entries: Sequence[TraceEntry], leaf_ids: Sequence[int]) -> list[frozenset]:
    """Leaf-id set covered by each merge, in merge order."""
    members = {i: frozenset([i]) for i in leaf_ids}
    out = []
    for e in entries:
        members[e.new_id] = members[e.a_id] | members[e.b_id]
        out.append(members[e.new_id])
    return out


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def pair_index(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-major strict upper-triangle pairs of an ``n x n`` matrix and their flat offsets."""
    rows, cols = np.triu_indices(n, k=1)
    rows.setflags(write=False)
    cols.setflags(write=False)
    flat = rows * n + cols
    flat.setflags(write=False)
    return rows, cols, flat


def num_pairs(n: int) -> int:
    return n * (n - 1) // 2


def compatibility_scores(X: FeatureSet, params: ParamStore) -> Tensor:
    """Strict upper triangle of ``(X W_C)(X W_C)^T``, flattened row by row."""
    if X.n < 2:
        raise ValueError(f"compatibility scores need at least 2 nodes, got {X.n}")
    proj = ad.matmul(X.nodes, params["hier.W_C"])
    gram = ad.matmul(proj, ad.transpose(proj))
    return ad.take(gram, pair_index(X.n)[2])


def sample_gumbel(n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(n)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def gumbel_st_select(logits: Tensor, cfg: GumbelConfig,
                     rng: "np.random.Generator | None" = None,
                     noise: "np.ndarray | None" = None) -> tuple[Tensor, Tensor]:
    """Straight-through Gumbel-softmax sample over a 1-D vector of logits.

    Returns ``(one_hot, soft)``: ``one_hot`` carries the discrete choice
    forward and routes its gradient into ``soft``.  Ties go to the lowest
    index.  In greedy mode no noise is added; otherwise noise comes from
    ``noise`` if given, else from ``rng``.
    """
    h = logits.shape[0]
    if cfg.mode == "greedy":
        g = np.zeros(h)
    elif noise is not None:
        g = np.asarray(noise, dtype=np.float64)
        if g.shape != (h,):
            raise ValueError(f"noise shape {g.shape} does not match logits ({h},)")
    else:
        if rng is None:
            raise ValueError("sample mode needs an rng or explicit noise")
        g = sample_gumbel(h, rng)
    soft = ad.softmax_rows(ad.scalar_mul(ad.add(logits, Tensor(g)), 1.0 / cfg.tau))
    hard = np.zeros(h)
    hard[int(np.argmax(soft.data))] = 1.0
    return ad.straight_through(hard, soft), soft


def fuse_pair(X: FeatureSet, a: int, b: int, params: ParamStore,
              weight: "Tensor | None" = None, new_id: "int | None" = None) -> FeatureSet:
    """Replace node ``a`` by ``ReLU(W_F [x_a, x_b])`` and drop node ``b``.

    ``weight`` is an optional scalar tensor multiplying the fused node; the
    selection path passes the chosen one-hot entry so the choice receives
    gradient.
    """
    if not (0 <= a < X.n and 0 <= b < X.n):
        raise IndexError(f"pair ({a}, {b}) out of range for {X.n} nodes")
    if a == b:
        raise ValueError("cannot fuse a node with itself")
    if a > b:
        a, b = b, a
    pair = ad.pair_concat(X.nodes, a, b)
    fused = ad.relu(ad.matmul(pair, ad.transpose(params["hier.W_F"])))
    if weight is not None:
        fused = ad.scale_by(fused, weight)
    nid = X.next_id if new_id is None else new_id
    ids = list(X.node_ids)
    ids[a] = nid
    del ids[b]
    return FeatureSet(ad.merge_rows(X.nodes, a, b, fused), ids, X.branch, max(X.next_id, nid + 1))


def step(X: FeatureSet, cfg: GumbelConfig, params: ParamStore,
         rng: "np.random.Generator | None" = None, level: int = 0,
         keep_soft: bool = False, noise: "np.ndarray | None" = None
         ) -> tuple[FeatureSet, TraceEntry]:
    """One hierarchy level: score pairs, choose one, fuse it."""
    scores = compatibility_scores(X, params)
    one_hot, soft = gumbel_st_select(scores, cfg, rng, noise)
    h = int(np.argmax(one_hot.data))
    rows, cols, _ = pair_index(X.n)
    a, b = int(rows[h]), int(cols[h])
    weight = ad.index(one_hot if cfg.estimator == "st" else soft, h)
    out = fuse_pair(X, a, b, params, weight=weight)
    entry = TraceEntry(level, X.branch, X.node_ids[a], X.node_ids[b], X.next_id, a, b,
                       soft.data.copy() if keep_soft else None)
    return out, entry


def explicit_step(X: FeatureSet, entry: TraceEntry, params: ParamStore) -> FeatureSet:
    """Apply a recorded merge instead of choosing one."""
    try:
        a = X.node_ids.index(entry.a_id)
        b = X.node_ids.index(entry.b_id)
    except ValueError:
        raise TraceError(f"level {entry.level}: ids ({entry.a_id}, {entry.b_id}) "
                         f"not both present in {X.branch} nodes {X.node_ids}") from None
    if a == b:
        raise TraceError(f"level {entry.level}: node {entry.a_id} merged with itself")
    if entry.new_id in X.node_ids or entry.new_id < X.next_id:
        raise TraceError(f"level {entry.level}: id {entry.new_id} is not fresh")
    # the selection path multiplies by a one-hot value of exactly 1.0; match it bit for bit
    return fuse_pair(X, a, b, params, weight=Tensor(1.0), new_id=entry.new_id)


def reduce_to_one(X: FeatureSet, cfg: GumbelConfig, params: ParamStore,
                  rng: "np.random.Generator | None" = None) -> tuple[FeatureSet, HierarchyTrace]:
    """Run steps until a single node remains (no co-attention)."""
    trace = HierarchyTrace()
    level = 0
    while X.n > 1:
        X, e = step(X, cfg, params, rng, level)
        trace.append(e)
        level += 1
    return X, trace
