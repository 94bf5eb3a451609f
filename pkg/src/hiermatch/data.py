"""Synthetic cross-modal region features, stroke files, and the dataset format.

Dataset directory::

    manifest.txt   "# hiermatch-dataset 1", key=value header (d_raw and the
                   generating spec), "---", then one record per line:
                   ``record_id identity modality n offset leaves tree``
                   leaves: comma-separated part indices; tree: ``a-b-new``
                   merges joined by ``;`` in local node ids, or ``-``
    features.bin   every record's ``n x d_raw`` block, little-endian float64
    split.txt      ``identity train|test`` per line
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hierarchy import TraceEntry

DATASET_VERSION = "hiermatch-dataset 1"
DETAIL_LEVELS = ("full", "coarse", "coarse++")


class DataError(ValueError):
    pass


class StrokeParseError(DataError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


# --------------------------------------------------------------------------
# strokes and boxes
# --------------------------------------------------------------------------

Box = tuple[float, float, float, float]


def parse_strokes(text: str) -> list[list[tuple[float, float]]]:
    """One stroke per line, ``x1,y1;x2,y2;...``.  Blank lines and ``#`` comments are skipped."""
    strokes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        pts = []
        for tok in line.split(";"):
            tok = tok.strip()
            if not tok:
                continue
            xy = tok.split(",")
            if len(xy) != 2:
                raise StrokeParseError(lineno, f"point {tok!r} is not 'x,y'")
            try:
                x, y = float(xy[0]), float(xy[1])
            except ValueError:
                raise StrokeParseError(lineno, f"point {tok!r} is not numeric") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise StrokeParseError(lineno, f"point {tok!r} is not finite")
            pts.append((x, y))
        if len(pts) < 2:
            raise StrokeParseError(lineno, "a stroke needs at least 2 points")
        strokes.append(pts)
    return strokes


def read_stroke_file(path) -> list[list[tuple[float, float]]]:
    return parse_strokes(Path(path).read_text())


def stroke_bboxes(strokes: Sequence[Sequence[tuple[float, float]]]) -> list[Box]:
    boxes = []
    for pts in strokes:
        arr = np.asarray(pts, dtype=np.float64)
        x0, y0 = arr.min(axis=0)
        x1, y1 = arr.max(axis=0)
        boxes.append((float(x0), float(y0), float(x1), float(y1)))
    return boxes


def grid_regions(width: int, height: int, k: int) -> list[Box]:
    """Tile the canvas into ``k`` rectangles, ``rows x cols`` with rows the largest divisor <= sqrt(k)."""
    if k < 1:
        raise DataError("need at least one region")
    rows = max(r for r in range(1, math.isqrt(k) + 1) if k % r == 0)
    cols = k // rows
    if cols > width or rows > height:
        raise DataError(f"{k} regions do not fit on a {width}x{height} canvas")
    xs = [round(i * width / cols) for i in range(cols + 1)]
    ys = [round(j * height / rows) for j in range(rows + 1)]
    return [(float(xs[i]), float(ys[j]), float(xs[i + 1]), float(ys[j + 1]))
            for j in range(rows) for i in range(cols)]


def stroke_features(strokes, d_raw: int, width: float, height: float) -> np.ndarray:
    """Hand-crafted stand-in for pooled CNN features: box geometry plus a point-density histogram."""
    if d_raw < 7:
        raise DataError("d_raw must be at least 7 for stroke features")
    g = math.isqrt(d_raw - 6)
    feats = np.zeros((len(strokes), d_raw))
    for i, pts in enumerate(strokes):
        arr = np.asarray(pts, dtype=np.float64)
        x0, y0 = arr.min(axis=0)
        x1, y1 = arr.max(axis=0)
        feats[i, :6] = [x0 / width, y0 / height, x1 / width, y1 / height,
                        (x1 - x0) / width, (y1 - y0) / height]
        cx = np.clip((arr[:, 0] / width * g).astype(int), 0, g - 1)
        cy = np.clip((arr[:, 1] / height * g).astype(int), 0, g - 1)
        hist = np.bincount(cy * g + cx, minlength=g * g).astype(np.float64)
        feats[i, 6:6 + g * g] = hist / len(arr)
    return feats


# --------------------------------------------------------------------------
# synthetic generation
# --------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Knobs for the planted-hierarchy generator.

    Leaf ``j`` of identity ``i`` is ``category_scale * c_j + identity_scale * t_ij``
    where ``c_j`` is shared by every identity and ``t_i`` is a random walk
    down identity ``i``'s own random binary tree (step size shrinking by
    ``branch_decay`` per level), so siblings in the tree resemble each other.
    Only ``mean_retention`` of each walk's average over its leaves is kept,
    which controls how much identity signal survives plain mean pooling.
    Leaves ``0 .. n_coarse-1`` are coarse parts; the rest are detail parts,
    whose prototypes are scaled by ``detail_scale``.  Each modality then adds
    its own Gaussian noise of scale ``noise_scale``.
    """

    n_identities: int = 100
    n_test: int = 50
    d_raw: int = 32
    n_regions_photo: int = 16
    n_strokes_sketch: tuple[int, int] = (16, 16)
    detail_level: str = "full"
    noise_scale: float = 0.1
    seed: int = 0
    n_coarse: int = -1
    category_scale: float = 1.0
    identity_scale: float = 0.5
    branch_decay: float = 0.7
    mean_retention: float = 1.0
    detail_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.n_strokes_sketch, (list, tuple)):
            self.n_strokes_sketch = tuple(int(v) for v in self.n_strokes_sketch)
        if self.n_regions_photo < 1:
            raise DataError("n_regions_photo must be >= 1")
        if self.detail_level not in DETAIL_LEVELS:
            raise DataError(f"detail_level must be one of {DETAIL_LEVELS}")
        if not 0 <= self.n_test <= self.n_identities:
            raise DataError("n_test must lie in [0, n_identities]")
        if self.n_coarse < 0:
            self.n_coarse = max(1, self.n_regions_photo // 2)
        lo, hi = self.n_strokes_sketch
        if not 1 <= lo <= hi:
            raise DataError("n_strokes_sketch must be a range lo <= hi with lo >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_strokes_sketch"] = f"{self.n_strokes_sketch[0]}-{self.n_strokes_sketch[1]}"
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "SyntheticSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, val in values.items():
            if key not in kinds:
                raise DataError(f"unknown spec key {key!r}")
            if key == "n_strokes_sketch":
                if isinstance(val, str):
                    lo, _, hi = val.partition("-")
                    val = (int(lo), int(hi or lo))
            elif isinstance(val, str):
                kind = kinds[key]
                val = {"int": int, "float": float, "str": str}[kind](val)
            kw[key] = val
        return cls(**kw)


@dataclass
class RegionFeatureRecord:
    identity: int
    modality: str
    features: np.ndarray
    leaves: list[int]
    tree: list[TraceEntry] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    d_raw: int
    records: list[RegionFeatureRecord]
    split: dict[int, str]
    meta: dict[str, str] = field(default_factory=dict)

    def identities(self, which: str) -> list[int]:
        return sorted(i for i, s in self.split.items() if s == which)

    def record(self, identity: int, modality: str) -> RegionFeatureRecord:
        for r in self.records:
            if r.identity == identity and r.modality == modality:
                return r
        raise KeyError((identity, modality))

    def pairs(self, which: str) -> list[tuple[RegionFeatureRecord, RegionFeatureRecord]]:
        """``(sketch, photo)`` per identity in the split, ordered by identity."""
        by_key = {(r.identity, r.modality): r for r in self.records}
        return [(by_key[(i, "sketch")], by_key[(i, "photo")]) for i in self.identities(which)]


def random_merge_tree(n_leaves: int, rng: np.random.Generator) -> list[TraceEntry]:
    """Uniformly random agglomeration: merge a random live pair until one node remains."""
    live = list(range(n_leaves))
    out = []
    nxt = n_leaves
    for level in range(n_leaves - 1):
        i, j = sorted(rng.choice(len(live), size=2, replace=False))
        a, b = live[i], live[j]
        out.append(TraceEntry(level, "sketch", a, b, nxt))
        live[i] = nxt
        del live[j]
        nxt += 1
    return out


def restrict_tree(tree: Sequence[TraceEntry], kept: Sequence[int], branch: str) -> list[TraceEntry]:
    """Merge order over only the ``kept`` leaves, renumbered to local ids ``0..len(kept)-1``.

    Internal nodes that lose one side collapse into the surviving side.
    """
    local = {leaf: k for k, leaf in enumerate(kept)}
    rep: dict[int, int | None] = {}
    nxt = len(kept)
    out = []

    def lookup(node):
        if node in rep:
            return rep[node]
        return local.get(node)

    for e in tree:
        ra, rb = lookup(e.a_id), lookup(e.b_id)
        if ra is not None and rb is not None:
            out.append(TraceEntry(len(out), branch, ra, rb, nxt))
            rep[e.new_id] = nxt
            nxt += 1
        else:
            rep[e.new_id] = ra if ra is not None else rb
    return out


def _tree_vectors(tree: Sequence[TraceEntry], n_leaves: int, dim: int, decay: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Random walk from the root down to every leaf."""
    root = tree[-1].new_id if tree else 0
    vec = {root: rng.standard_normal(dim)}
    depth = {root: 0}
    for e in reversed(tree):
        for child in (e.a_id, e.b_id):
            depth[child] = depth[e.new_id] + 1
            vec[child] = vec[e.new_id] + decay ** depth[child] * rng.standard_normal(dim)
    return np.stack([vec[j] for j in range(n_leaves)])


def _sketch_leaves(spec: SyntheticSpec, rng: np.random.Generator) -> dict[str, list[int]]:
    """Exposed parts at each detail level; the draws do not depend on the level."""
    n = spec.n_regions_photo
    coarse = list(range(min(spec.n_coarse, n)))
    detail = list(range(len(coarse), n))
    lo, hi = spec.n_strokes_sketch
    k = int(rng.integers(lo, hi + 1))
    order = rng.permutation(detail)
    n_detail = int(np.clip(k - len(coarse), 0, len(detail)))
    shown = order[:n_detail]
    half = shown[: len(shown) - len(shown) // 2]
    return {
        "full": sorted(coarse + [int(v) for v in shown]),
        "coarse": sorted(coarse + [int(v) for v in half]),
        "coarse++": sorted(coarse),
    }


def generate(spec: SyntheticSpec) -> Dataset:
    """Sketch and photo records for every identity; the last ``n_test`` identities form the test split."""
    n, dim = spec.n_regions_photo, spec.d_raw
    cat_rng = np.random.default_rng([spec.seed, 0])
    category = cat_rng.standard_normal((n, dim))
    records = []
    split = {}
    n_train = spec.n_identities - spec.n_test
    for ident in range(spec.n_identities):
        rng = np.random.default_rng([spec.seed, 1, ident])
        tree = random_merge_tree(n, rng)
        walk = _tree_vectors(tree, n, dim, spec.branch_decay, rng)
        walk = walk - (1.0 - spec.mean_retention) * walk.mean(axis=0)
        proto = spec.category_scale * category + spec.identity_scale * walk
        proto[spec.n_coarse:] *= spec.detail_scale
        photo = proto + spec.noise_scale * rng.standard_normal((n, dim))
        sketch_all = proto + spec.noise_scale * rng.standard_normal((n, dim))
        kept = _sketch_leaves(spec, rng)[spec.detail_level]
        records.append(RegionFeatureRecord(ident, "sketch", sketch_all[kept], kept,
                                           restrict_tree(tree, kept, "sketch")))
        records.append(RegionFeatureRecord(ident, "photo", photo, list(range(n)),
                                           restrict_tree(tree, list(range(n)), "photo")))
        split[ident] = "train" if ident < n_train else "test"
    meta = {f"spec.{k}": str(v) for k, v in spec.to_dict().items()}
    return Dataset(dim, records, split, meta)


def benchmark_spec(seed: int = 0, **overrides) -> SyntheticSpec:
    """Generator settings used by the retrieval benchmark.

    Identity signal lives in where each part sits in its identity's tree,
    not in a shared category template, and the per-identity mean over parts
    is removed.  Detail parts carry less energy than coarse ones.
    """
    values = dict(n_identities=100, n_test=50, d_raw=32, n_regions_photo=8,
                  n_strokes_sketch=(8, 8), noise_scale=0.1, seed=seed, category_scale=0.0,
                  identity_scale=10.0, branch_decay=0.9, mean_retention=0.0, detail_scale=0.3)
    values.update(overrides)
    return SyntheticSpec(**values)


def with_detail_level(spec: SyntheticSpec, level: str) -> SyntheticSpec:
    values = asdict(spec)
    values["detail_level"] = level
    return SyntheticSpec(**values)


def spec_from_dataset(ds: Dataset) -> "SyntheticSpec | None":
    values = {k[len("spec."):]: v for k, v in ds.meta.items() if k.startswith("spec.")}
    return SyntheticSpec.from_dict(values) if values else None


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def _tree_str(tree: Iterable[TraceEntry]) -> str:
    s = ";".join(f"{e.a_id}-{e.b_id}-{e.new_id}" for e in tree)
    return s or "-"


def _parse_tree(text: str, branch: str) -> list[TraceEntry]:
    if text == "-":
        return []
    out = []
    for level, tok in enumerate(text.split(";")):
        a, b, c = (int(v) for v in tok.split("-"))
        out.append(TraceEntry(level, branch, a, b, c))
    return out


def write_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {DATASET_VERSION}", f"d_raw={ds.d_raw}", f"n_records={len(ds.records)}"]
    lines += [f"{k}={v}" for k, v in ds.meta.items()]
    lines.append("---")
    chunks = []
    offset = 0
    for rid, r in enumerate(ds.records):
        if r.features.ndim != 2 or r.features.shape[1] != ds.d_raw or r.n < 1:
            raise DataError(f"record {rid} has features of shape {r.features.shape}")
        if not np.all(np.isfinite(r.features)):
            raise DataError(f"record {rid} has non-finite features")
        leaves = ",".join(str(v) for v in r.leaves) or "-"
        lines.append(f"{rid} {r.identity} {r.modality} {r.n} {offset} {leaves} {_tree_str(r.tree)}")
        chunks.append(np.ascontiguousarray(r.features, dtype="<f8").tobytes())
        offset += r.features.size
    (directory / "features.bin").write_bytes(b"".join(chunks))
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    (directory / "split.txt").write_text(
        "".join(f"{i} {s}\n" for i, s in sorted(ds.split.items())))


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    paths = {name: directory / name for name in ("manifest.txt", "features.bin", "split.txt")}
    missing = [n for n, p in paths.items() if not p.exists()]
    if missing:
        raise DataError(f"{directory}: missing {', '.join(missing)}")
    lines = paths["manifest.txt"].read_text().splitlines()
    if not lines or lines[0] != f"# {DATASET_VERSION}":
        raise DataError(f"{paths['manifest.txt']}: not a dataset manifest")
    raw = np.frombuffer(paths["features.bin"].read_bytes(), dtype="<f8")
    header: dict[str, str] = {}
    records = []
    body = False
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "---":
            body = True
            continue
        if not body:
            key, sep, val = line.partition("=")
            if not sep:
                raise DataError(f"manifest.txt:{lineno}: expected key=value")
            header[key] = val
            continue
        parts = line.split()
        if len(parts) != 7:
            raise DataError(f"manifest.txt:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            _, ident, modality, n, off, leaves, tree = parts
            n, off, d_raw = int(n), int(off), int(header["d_raw"])
            if off + n * d_raw > raw.size:
                raise DataError(f"manifest.txt:{lineno}: record runs past the end of features.bin")
            feats = raw[off:off + n * d_raw].reshape(n, d_raw).copy()
            leaf_list = [] if leaves == "-" else [int(v) for v in leaves.split(",")]
            records.append(RegionFeatureRecord(int(ident), modality, feats, leaf_list,
                                               _parse_tree(tree, modality)))
        except (KeyError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"manifest.txt:{lineno}: {exc}") from None
    split = {}
    for lineno, line in enumerate(paths["split.txt"].read_text().splitlines(), start=1):
        if not line.strip():
            continue
        ident, _, which = line.partition(" ")
        if which not in ("train", "test"):
            raise DataError(f"split.txt:{lineno}: expected 'identity train|test'")
        split[int(ident)] = which
    d_raw = int(header.pop("d_raw"))
    n_rec = int(header.pop("n_records", len(records)))
    if n_rec != len(records):
        raise DataError(f"manifest lists {len(records)} records, header says {n_rec}")
    return Dataset(d_raw, records, split, header)
