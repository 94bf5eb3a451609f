"""Training loop, retrieval evaluation, and hierarchy tracing."""

from __future__ import annotations

import hashlib
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import Dataset, RegionFeatureRecord
from .embedder import ModelConfig, embed_pair, embed_single, triplet_loss
from .hierarchy import (
    GumbelConfig,
    HierarchyTrace,
    TraceEntry,
    cluster_sets,
)
from .params import FUSION_GAIN, Adam, ParamStore, read_arrays, write_arrays

log = logging.getLogger(__name__)

MODE_FLAGS = ("no_coattn", "no_hierarchy", "explicit_hierarchy")


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int = 512
    d_h: int = 64
    tau: float = 1.0
    margin: float = 0.5
    lr: float = 1e-4
    batch: int = 16
    epochs: int = 200
    seed: int = 0
    patience: int = 20
    init_gain: float = 1.0
    fusion_gain: float = FUSION_GAIN
    no_coattn: bool = False
    no_hierarchy: bool = False
    explicit_hierarchy: bool = False

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch and patience must be >= 1, epochs >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        try:
            self.model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model(self) -> ModelConfig:
        return ModelConfig(d=self.d, d_h=self.d_h, tau=self.tau, margin=self.margin,
                           no_coattn=self.no_coattn, no_hierarchy=self.no_hierarchy,
                           explicit_hierarchy=self.explicit_hierarchy)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        values = asdict(self)
        values.update(kw)
        return TrainConfig(**values)

    def fingerprint(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def mode_name(self) -> str:
        on = [f for f in MODE_FLAGS if getattr(self, f)]
        return "+".join(on) if on else "full"

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, kinds[key], raw)
        return cls(**kw)


def _coerce(key: str, kind: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return {"int": int, "float": float}[kind](raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def benchmark_config(seed: int = 0, **overrides) -> TrainConfig:
    """Desk-scale training settings paired with ``data.benchmark_spec``."""
    values = dict(d=64, d_h=16, lr=1e-3, batch=4, epochs=100, seed=seed)
    values.update(overrides)
    return TrainConfig(**values)


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        out[key.strip()] = val.strip()
    return out


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return TrainConfig.from_mapping(parse_kv(text))


def build_fingerprint() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --------------------------------------------------------------------------
# traces from stored ground-truth trees
# --------------------------------------------------------------------------

def record_trace(rec: RegionFeatureRecord, branch: str) -> HierarchyTrace:
    return HierarchyTrace(TraceEntry(e.level, branch, e.a_id, e.b_id, e.new_id) for e in rec.tree)


def _traces_for(cfg: ModelConfig, sketch: RegionFeatureRecord, photo: RegionFeatureRecord):
    if not cfg.explicit_hierarchy:
        return None, None
    return record_trace(sketch, "sketch"), record_trace(photo, "photo")


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    params: ParamStore
    opt: Adam
    epoch: int = 0
    losses: list[float] = field(default_factory=list)
    best: float = math.inf
    best_epoch: int = -1


def init_state(cfg: TrainConfig, d_raw: int) -> TrainState:
    params = ParamStore.init(d_raw, cfg.d, cfg.d_h, seed=cfg.seed, gain=cfg.init_gain,
                             fusion_gain=cfg.fusion_gain)
    return TrainState(params, Adam(params, lr=cfg.lr))


def triplet_step_loss(params: ParamStore, cfg: ModelConfig, anchor: RegionFeatureRecord,
                      pos: RegionFeatureRecord, neg: RegionFeatureRecord,
                      gumbel: GumbelConfig, rng: np.random.Generator) -> ad.Tensor:
    s_tr, p_tr = _traces_for(cfg, anchor, pos)
    e_pos = embed_pair(anchor.features, pos.features, params, cfg, gumbel, rng, s_tr, p_tr)
    s_tr, n_tr = _traces_for(cfg, anchor, neg)
    e_neg = embed_pair(anchor.features, neg.features, params, cfg, gumbel, rng, s_tr, n_tr)
    return triplet_loss(e_pos, e_neg, cfg.margin)


def run_epoch(state: TrainState, cfg: TrainConfig, ds: Dataset) -> float:
    """One pass over the training sketches; returns the mean triplet loss."""
    model = cfg.model()
    gumbel = GumbelConfig(tau=cfg.tau, mode="sample")
    rng = np.random.default_rng([cfg.seed, 7, state.epoch])
    pairs = ds.pairs("train")
    if len(pairs) < 2:
        raise ValueError("training needs at least two identities")
    order = rng.permutation(len(pairs))
    total = 0.0
    for start in range(0, len(order), cfg.batch):
        chunk = order[start:start + cfg.batch]
        state.params.zero_grad()
        for i in chunk:
            j = int(rng.integers(len(pairs) - 1))
            j += j >= i
            sketch, photo = pairs[i]
            loss = triplet_step_loss(state.params, model, sketch, photo, pairs[j][1], gumbel, rng)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {state.epoch}")
            ad.backward(loss)
            total += loss.item()
        state.opt.step(scale=1.0 / len(chunk))
    for name, t in state.params.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"parameter {name} became non-finite at epoch {state.epoch}")
    state.epoch += 1
    return total / len(order)


def save_checkpoint(state: TrainState, cfg: TrainConfig, directory, d_raw: int) -> None:
    arrays = dict(state.params.arrays())
    for k in state.params:
        arrays[f"adam.m/{k}"] = state.opt.m[k]
        arrays[f"adam.v/{k}"] = state.opt.v[k]
    header = {f"config.{k}": v for k, v in cfg.to_dict().items()}
    header.update({
        "d_raw": d_raw,
        "epoch": state.epoch,
        "adam_t": state.opt.t,
        "best": repr(state.best),
        "best_epoch": state.best_epoch,
        "losses": ",".join(repr(v) for v in state.losses) or "-",
    })
    write_arrays(Path(directory), arrays, header)


def load_checkpoint(directory) -> tuple[TrainConfig, TrainState, int]:
    header, arrays = read_arrays(Path(directory))
    cfg = TrainConfig.from_mapping({k[len("config."):]: v for k, v in header.items()
                                    if k.startswith("config.")})
    params = ParamStore({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    opt = Adam(params, lr=cfg.lr)
    opt.t = int(header.get("adam_t", 0))
    for k in params:
        if f"adam.m/{k}" in arrays:
            opt.m[k] = arrays[f"adam.m/{k}"]
            opt.v[k] = arrays[f"adam.v/{k}"]
    losses_s = header.get("losses", "-")
    losses = [] if losses_s == "-" else [float(v) for v in losses_s.split(",")]
    state = TrainState(params, opt, int(header.get("epoch", 0)), losses,
                       float(header.get("best", "inf")), int(header.get("best_epoch", -1)))
    return cfg, state, int(header["d_raw"])


def train(cfg: TrainConfig, ds: Dataset, out_dir=None, state: "TrainState | None" = None,
          max_epochs: "int | None" = None,
          on_epoch: "Callable[[int, float], None] | None" = None) -> TrainState:
    """Train until ``cfg.epochs`` or a ``cfg.patience``-epoch loss plateau.

    With ``out_dir`` set, the checkpoint is rewritten after every epoch and a
    per-epoch log is appended to ``train_log.csv``.  On a numeric failure the
    last good state is dumped to ``out_dir/failed`` before re-raising.
    """
    state = state or init_state(cfg, ds.d_raw)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = out / "train_log.csv"
        if state.epoch == 0 or not logf.exists():
            logf.write_text("epoch,loss,seconds\n")
    stop_at = cfg.epochs if max_epochs is None else min(cfg.epochs, state.epoch + max_epochs)
    while state.epoch < stop_at:
        if state.best_epoch >= 0 and state.epoch - state.best_epoch > cfg.patience:
            log.info("loss plateau for %d epochs, stopping at epoch %d", cfg.patience, state.epoch)
            break
        t0 = time.perf_counter()
        snapshot = state.params.copy() if out is not None else None
        try:
            loss = run_epoch(state, cfg, ds)
        except NumericError:
            if out is not None:
                dump = TrainState(snapshot, state.opt, state.epoch, state.losses,
                                  state.best, state.best_epoch)
                save_checkpoint(dump, cfg, out / "failed", ds.d_raw)
            raise
        state.losses.append(loss)
        if loss < state.best - 1e-12:
            state.best, state.best_epoch = loss, state.epoch - 1
        dt = time.perf_counter() - t0
        log.info("epoch %d loss %.6f (%.1fs)", state.epoch, loss, dt)
        if out is not None:
            save_checkpoint(state, cfg, out, ds.d_raw)
            with open(out / "train_log.csv", "a") as fh:
                fh.write(f"{state.epoch},{loss!r},{dt:.3f}\n")
        if on_epoch is not None:
            on_epoch(state.epoch, loss)
    return state


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class RetrievalReport:
    acc_at_1: float
    acc_at_10: float
    ranks: list[int]
    config: dict
    fingerprint: str
    build: str
    label: str = "full"
    pairing: str = "single"
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def n_queries(self) -> int:
        return len(self.ranks)

    def to_csv_row(self) -> dict:
        return {"mode": self.label, "acc@1": f"{self.acc_at_1:.6f}",
                "acc@10": f"{self.acc_at_10:.6f}", "queries": self.n_queries,
                "pairing": self.pairing, "config": self.fingerprint, "build": self.build}


def rank_gallery(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending squared distance; ties keep gallery order."""
    dist = np.sum((gallery - query[None, :]) ** 2, axis=1)
    return np.argsort(dist, kind="stable")


def ranks_from_distances(dist: np.ndarray) -> list[int]:
    """1-based rank of the true match, row ``q`` of ``dist`` holding query ``q``'s distances."""
    ranks = []
    for q in range(dist.shape[0]):
        order = np.argsort(dist[q], kind="stable")
        ranks.append(int(np.nonzero(order == q)[0][0]) + 1)
    return ranks


def embed_gallery(params: ParamStore, cfg: ModelConfig, records, branch: str) -> np.ndarray:
    out = []
    with ad.no_grad():
        for rec in records:
            trace = record_trace(rec, branch) if cfg.explicit_hierarchy else None
            vec, _ = embed_single(rec.features, params, cfg, trace=trace, branch=branch)
            out.append(vec.data[0])
    return np.stack(out)


def distance_matrix(params: ParamStore, cfg: ModelConfig, sketches, photos,
                    pairing: str = "single") -> np.ndarray:
    if pairing == "single":
        q = embed_gallery(params, cfg, sketches, "sketch")
        g = embed_gallery(params, cfg, photos, "photo")
        return np.sum((q[:, None, :] - g[None, :, :]) ** 2, axis=2)
    if pairing != "paired":
        raise ValueError(f"unknown pairing {pairing!r}")
    dist = np.zeros((len(sketches), len(photos)))
    with ad.no_grad():
        for i, s in enumerate(sketches):
            for j, p in enumerate(photos):
                s_tr, p_tr = _traces_for(cfg, s, p)
                e = embed_pair(s.features, p.features, params, cfg,
                               sketch_trace=s_tr, photo_trace=p_tr)
                dist[i, j] = e.distance().item()
    return dist


def evaluate(params: ParamStore, cfg: TrainConfig, ds: Dataset, split: str = "test",
             pairing: str = "single", label: "str | None" = None) -> RetrievalReport:
    """Every sketch in ``split`` queries the gallery of every photo in ``split``."""
    t0 = time.perf_counter()
    pairs = ds.pairs(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty")
    dist = distance_matrix(params, cfg.model(), [s for s, _ in pairs], [p for _, p in pairs],
                           pairing)
    ranks = ranks_from_distances(dist)
    r = np.asarray(ranks)
    return RetrievalReport(
        acc_at_1=float(np.mean(r <= 1)),
        acc_at_10=float(np.mean(r <= 10)),
        ranks=ranks,
        config=cfg.to_dict(),
        fingerprint=cfg.fingerprint(),
        build=build_fingerprint(),
        label=label or cfg.mode_name(),
        pairing=pairing,
        wall_clock=time.perf_counter() - t0,
    )


# --------------------------------------------------------------------------
# tracing
# --------------------------------------------------------------------------

def merge_fidelity(entries, truth, n_leaves: int) -> float:
    """Fraction of merges whose leaf set is also a cluster of the ground-truth tree."""
    if not entries:
        return 1.0
    leaf_ids = list(range(n_leaves))
    true_sets = set(cluster_sets(truth, leaf_ids))
    got = cluster_sets(entries, leaf_ids)
    return sum(s in true_sets for s in got) / len(got)


@dataclass
class TraceResult:
    trace: HierarchyTrace
    soft: list[np.ndarray]
    final: np.ndarray
    fidelity: "float | None"


def trace_record(params: ParamStore, cfg: TrainConfig, rec: RegionFeatureRecord) -> TraceResult:
    """Greedy merge trace of one record, with per-level soft vectors and fidelity."""
    model = cfg.model()
    if model.no_hierarchy:
        model = ModelConfig(**{**model.to_dict(), "no_hierarchy": False})
    model = ModelConfig(**{**model.to_dict(), "explicit_hierarchy": False})
    with ad.no_grad():
        vec, trace = embed_single(rec.features, params, model, branch=rec.modality,
                                  keep_soft=True)
    fid = merge_fidelity(trace.entries, rec.tree, rec.n) if rec.tree else None
    return TraceResult(trace, [e.soft for e in trace], vec.data[0].copy(), fid)
