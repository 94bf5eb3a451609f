"""Run a matrix of model variants and tabulate their retrieval reports."""

from __future__ import annotations

import csv
import io
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DETAIL_LEVELS, Dataset, generate, spec_from_dataset, with_detail_level
from .training import RetrievalReport, TrainConfig, TrainState, evaluate, train

log = logging.getLogger(__name__)

ALL_MODES = ("full", "no_coattn", "no_hierarchy", "explicit_hierarchy", "coarse", "coarse++")
_TRAINED_FLAGS = {"no_coattn", "no_hierarchy", "explicit_hierarchy"}


@dataclass
class AblationRow:
    mode: str
    seed: int
    report: "RetrievalReport | None" = None
    error: "str | None" = None

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class AblationResult:
    rows: list[AblationRow] = field(default_factory=list)

    def modes(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.mode not in seen:
                seen.append(r.mode)
        return seen

    def values(self, mode: str, metric: str = "acc_at_1") -> list[float]:
        return [getattr(r.report, metric) for r in self.rows if r.mode == mode and r.ok]

    def mean(self, mode: str, metric: str = "acc_at_1") -> float:
        v = self.values(mode, metric)
        return float(np.mean(v)) if v else float("nan")

    def to_table(self) -> str:
        head = ["mode", "seeds", "acc@1", "acc@10", "acc@1 per seed", "status"]
        body = []
        for mode in self.modes():
            rows = [r for r in self.rows if r.mode == mode]
            failed = [r for r in rows if not r.ok]
            a1 = self.values(mode)
            status = "ok" if not failed else f"FAILED {len(failed)}/{len(rows)}"
            body.append([
                mode, str(len(rows)),
                f"{100 * self.mean(mode):.2f}" if a1 else "-",
                f"{100 * self.mean(mode, 'acc_at_10'):.2f}" if a1 else "-",
                " ".join(f"{100 * v:.1f}" for v in a1) or "-",
                status,
            ])
        widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
                  for i, h in enumerate(head)]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
        lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["mode", "seed", "acc@1", "acc@10", "queries", "pairing", "config", "build", "error"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            row = {"mode": r.mode, "seed": r.seed, "error": r.error or ""}
            if r.report is not None:
                row.update({k: v for k, v in r.report.to_csv_row().items() if k != "mode"})
            w.writerow(row)
        return buf.getvalue()


def _variant(mode: str, base: TrainConfig) -> TrainConfig:
    flags = {f: False for f in _TRAINED_FLAGS}
    if mode in _TRAINED_FLAGS:
        flags[mode] = True
    return base.replace(**flags)


def query_variant(ds: Dataset, level: str) -> Dataset:
    """Same dataset with sketches regenerated at ``level`` detail; photos untouched."""
    spec = spec_from_dataset(ds)
    if spec is None:
        raise ValueError("dataset carries no generating spec, cannot build detail variants")
    alt = generate(with_detail_level(spec, level))
    photos = [r for r in ds.records if r.modality == "photo"]
    sketches = [r for r in alt.records if r.modality == "sketch"]
    return Dataset(ds.d_raw, sketches + photos, dict(ds.split), dict(alt.meta))


def run_ablation(base: TrainConfig, ds: Dataset, modes: Sequence[str] = ALL_MODES,
                 seeds: Sequence[int] = (0,), pairing: str = "single",
                 models: "dict | None" = None) -> AblationResult:
    """Train and evaluate every requested mode for every seed.

    ``coarse`` and ``coarse++`` reuse the full model and swap in sketches with
    detail strokes removed.  A failing row is recorded with its error and
    does not stop the others.  ``models`` (optional) caches trained states
    keyed by ``(mode, seed)``.
    """
    unknown = [m for m in modes if m not in ALL_MODES]
    if unknown:
        raise ValueError(f"unknown ablation modes: {unknown}")
    models = {} if models is None else models
    result = AblationResult()

    def trained(mode: str, seed: int) -> tuple[TrainConfig, TrainState]:
        key = (mode, seed)
        cfg = _variant(mode, base).replace(seed=seed)
        if key not in models:
            log.info("training %s seed %d", mode, seed)
            models[key] = train(cfg, ds)
        return cfg, models[key]

    order = ["full"] + [m for m in modes if m != "full"]
    for seed in seeds:
        for mode in order:
            if mode not in modes and mode != "full":
                continue
            row = AblationRow(mode, seed)
            try:
                if mode in ("coarse", "coarse++"):
                    cfg, st = trained("full", seed)
                    if mode not in DETAIL_LEVELS:
                        raise ValueError(mode)
                    row.report = evaluate(st.params, cfg, query_variant(ds, mode), pairing=pairing,
                                          label=mode)
                else:
                    cfg, st = trained(mode, seed)
                    row.report = evaluate(st.params, cfg, ds, pairing=pairing, label=mode)
            except Exception as exc:  # a failed variant must not take the table down
                log.warning("ablation %s seed %d failed: %s", mode, seed, exc)
                row.error = f"{type(exc).__name__}: {exc}"
                log.debug(traceback.format_exc())
            if mode in modes:
                result.rows.append(row)
    return result


def write_ablation(result: AblationResult, out_dir) -> dict[str, Path]:
    from . import plotting

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "ablation.txt", "csv": out / "ablation.csv", "figure": out / "ablation.png"}
    paths["table"].write_text(result.to_table())
    paths["csv"].write_text(result.to_csv())
    modes = result.modes()
    plotting.ablation_bars(modes, [result.values(m) for m in modes],
                           [result.values(m, "acc_at_10") for m in modes], paths["figure"])
    return paths
