"""``hiermatch`` command line: gen-data, train, eval, trace, ablate.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError, SyntheticSpec, generate, read_dataset, write_dataset
from .params import CheckpointError
from .training import (
    ConfigError,
    NumericError,
    RetrievalReport,
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_config,
    parse_kv,
    save_checkpoint,
    trace_record,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("hiermatch")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    extra = _overrides(args.set)
    for flag in ("no_coattn", "no_hierarchy", "explicit_hierarchy"):
        if getattr(args, flag, False):
            extra[flag] = "true"
    return TrainConfig.from_mapping({**cfg.to_dict(), **extra})


def _dataset(path):
    try:
        return read_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None


def _checkpoint(path, ds=None):
    try:
        cfg, state, d_raw = load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    if ds is not None and d_raw != ds.d_raw:
        raise ConfigError(f"checkpoint expects d_raw={d_raw} but dataset has d_raw={ds.d_raw}")
    if state.params["proj.W"].data.shape != (d_raw, cfg.d):
        raise ConfigError("checkpoint weights do not match its recorded config")
    return cfg, state


def report_table(reports: list[RetrievalReport]) -> str:
    head = ["mode", "pairing", "queries", "acc@1", "acc@10", "config", "build"]
    body = [[r.label, r.pairing, str(r.n_queries), f"{100 * r.acc_at_1:.2f}",
             f"{100 * r.acc_at_10:.2f}", r.fingerprint, r.build] for r in reports]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(b) for b in body]) + "\n"


def _write_report(report: RetrievalReport, out: Path, gallery: int) -> None:
    from . import plotting

    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report_table([report]))
    row = report.to_csv_row()
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
    with open(out / "ranks.csv", "w") as fh:
        fh.write("query,rank\n")
        fh.writelines(f"{i},{r}\n" for i, r in enumerate(report.ranks))
    with open(out / "config.txt", "w") as fh:
        fh.writelines(f"{k} = {v}\n" for k, v in report.config.items())
    plotting.rank_histogram(report.ranks, out / "ranks.png", gallery_size=gallery)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    values = {}
    if args.spec:
        try:
            values = parse_kv(Path(args.spec).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read spec {args.spec}: {exc}") from None
    values.update(_overrides(args.set))
    try:
        spec = SyntheticSpec.from_dict(values)
    except (DataError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad generator spec: {exc}") from None
    ds = generate(spec)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.records)} records ({len(ds.identities('train'))} train / "
          f"{len(ds.identities('test'))} test identities) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import plotting

    ds = _dataset(args.data)
    out = Path(args.out)
    state = None
    if args.resume and (out / "manifest.txt").exists():
        cfg, state = _checkpoint(out, ds)
        extra = _overrides(args.set)
        fixed = sorted(k for k in extra if k in ("d", "d_h", "seed"))
        if fixed:
            raise ConfigError(f"cannot change {', '.join(fixed)} when resuming")
        if extra:
            cfg = TrainConfig.from_mapping({**cfg.to_dict(), **extra})
            state.opt.lr = cfg.lr
        log.info("resuming %s at epoch %d", out, state.epoch)
    else:
        cfg = _config(args)
    out.mkdir(parents=True, exist_ok=True)

    def progress(epoch, loss):
        if not args.quiet:
            print(f"epoch {epoch:4d}  loss {loss:.6f}", flush=True)

    state = train(cfg, ds, out_dir=out, state=state, max_epochs=args.max_epochs, on_epoch=progress)
    if state.epoch == 0:
        save_checkpoint(state, cfg, out, ds.d_raw)
    if state.losses:
        plotting.loss_curve(state.losses, out / "loss.png", title=f"training loss ({cfg.mode_name()})")
    print(f"checkpoint {out}  epochs {state.epoch}  "
          f"final loss {state.losses[-1] if state.losses else float('nan'):.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _dataset(args.data)
    cfg, state = _checkpoint(args.checkpoint, ds)
    report = evaluate(state.params, cfg, ds, split=args.split, pairing=args.pairing)
    sys.stdout.write(report_table([report]))
    if args.out:
        _write_report(report, Path(args.out), len(ds.pairs(args.split)))
    return EXIT_OK


def cmd_trace(args) -> int:
    from . import plotting

    ds = _dataset(args.data)
    cfg, state = _checkpoint(args.checkpoint, ds)
    try:
        rec = ds.record(args.identity, args.modality)
    except KeyError:
        raise DataError(f"no {args.modality} record for identity {args.identity}") from None
    res = trace_record(state.params, cfg, rec)
    text = res.trace.to_text()
    sys.stdout.write(text)
    for e in res.trace:
        print(f"# level {e.level} soft " + " ".join(f"{v:.4f}" for v in e.soft))
    if res.fidelity is not None:
        print(f"# fidelity {res.fidelity:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.txt").write_text(text)
        with open(out / "soft.csv", "w") as fh:
            fh.write("level,pair,weight\n")
            for lv, q in enumerate(res.soft):
                fh.writelines(f"{lv},{k},{v!r}\n" for k, v in enumerate(q))
        np.savetxt(out / "final.txt", res.final[None, :], delimiter=",")
        if res.soft:
            plotting.soft_levels(res.soft, out / "soft_levels.png")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import ALL_MODES, run_ablation, write_ablation

    ds = _dataset(args.data)
    cfg = _config(args)
    modes = args.modes.split(",") if args.modes else list(ALL_MODES)
    bad = [m for m in modes if m not in ALL_MODES]
    if bad:
        raise ConfigError(f"unknown ablation modes {bad}; choose from {', '.join(ALL_MODES)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    result = run_ablation(cfg, ds, modes=modes, seeds=seeds, pairing=args.pairing)
    sys.stdout.write(result.to_table())
    if args.out:
        paths = write_ablation(result, args.out)
        print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file (d, d_h, tau, margin, lr, batch, epochs, ...)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--no-coattn", dest="no_coattn", action="store_true")
    p.add_argument("--no-hierarchy", dest="no_hierarchy", action="store_true")
    p.add_argument("--explicit-hierarchy", dest="explicit_hierarchy", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hiermatch", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic planted-hierarchy dataset")
    p.add_argument("--spec", help="key = value generator spec")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, checkpointing every epoch")
    _model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--max-epochs", type=int, help="stop after this many more epochs")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--pairing", default="single", choices=("single", "paired"))
    p.add_argument("--out", help="directory for report.txt/csv, ranks.csv and ranks.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="greedy merge trace of one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--identity", type=int, required=True)
    p.add_argument("--modality", default="sketch", choices=("sketch", "photo"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("ablate", help="train and compare model variants")
    _model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--modes", help="comma-separated subset of modes (default: all)")
    p.add_argument("--seeds", default="0")
    p.add_argument("--pairing", default="single", choices=("single", "paired"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
