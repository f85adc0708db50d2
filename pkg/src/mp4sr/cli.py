"""Command-line pipeline.

Subcommands: preprocess, synth, pretrain, finetune, evaluate, ablate,
report. Exit codes: 0 success, 1 runtime or data error, 2 configuration
error. Setting MP4SR_VERIFY=1 switches the numeric kernel to float64.

Output directory layout (fixed so tests can assert paths):

    out/config.json      echo of the effective configuration
    out/checkpoints/     pretrain.ckpt, model.ckpt
    out/logs/            *_log.csv training logs
    out/reports/         metrics and comparison CSVs
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from . import evaluation as E
from . import kernel as K
from . import training as T
from .data import (
    cold_item_partition,
    kcore_filter,
    leave_one_out_split,
    load_feature_store,
    load_interactions,
    synth_generate,
    write_feature_store,
    write_interactions,
)
from .errors import ConfigError, Mp4srError
from .model import ItemFeatures
from .training import TrainConfig

RUN_CONFIG_PATH_KEYS = {"interactions", "feature_store", "output_dir"}
SYNTH_KEYS = {"n_users", "n_items", "d", "signal_strength", "seed"}


def load_run_config(path) -> tuple[TrainConfig, dict]:
    """Parse a JSON run configuration: TrainConfig fields plus dataset paths.
    Unknown keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    paths = {k: raw.pop(k) for k in list(raw) if k in RUN_CONFIG_PATH_KEYS}
    cfg = TrainConfig.from_dict(raw)
    return cfg, paths


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    extra = tuple(getattr(args, "variant", None) or ())
    if getattr(args, "cold_start", False):
        extra = extra + ("cold-start",)
    if extra:
        cfg = cfg.with_variants(*extra)
    cfg.validate()
    return cfg


def _out_dirs(out) -> dict[str, Path]:
    root = Path(out)
    dirs = {"root": root, "checkpoints": root / "checkpoints",
            "logs": root / "logs", "reports": root / "reports"}
    for p in dirs.values():
        p.mkdir(parents=True, exist_ok=True)
    return dirs


def _echo_config(cfg: TrainConfig, paths: dict, out: Path) -> None:
    payload = {"config": cfg.to_dict(), "paths": dict(sorted(paths.items()))}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(paths: dict):
    for key in ("interactions", "feature_store"):
        if key not in paths:
            raise ConfigError(f"run config is missing the {key!r} path")
    ds = load_interactions(paths["interactions"])
    store = load_feature_store(paths["feature_store"])
    return ds, store


def _print_table(rows: list[list[str]]) -> None:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    dirs = _out_dirs(args.out)
    ds = load_interactions(args.interactions)
    filtered = kcore_filter(ds, args.k)
    split = leave_one_out_split(filtered)
    write_interactions(filtered, dirs["root"] / "filtered.tsv")
    manifest = {
        "k": args.k,
        "input": str(args.interactions),
        "n_users": filtered.n_users,
        "n_items": filtered.n_items,
        "n_interactions": filtered.n_interactions,
        "avg_length": round(filtered.avg_length(), 6),
        "split_excluded_users": split.n_excluded,
        "train_lengths": {filtered.user_ids[u]: len(t) for u, t in zip(split.users, split.train)},
    }
    (dirs["root"] / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"preprocess: {filtered.n_users} users, {filtered.n_items} items, "
          f"{filtered.n_interactions} interactions (k={args.k})")
    return 0


def cmd_synth(args) -> int:
    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    unknown = set(raw) - SYNTH_KEYS
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    missing = SYNTH_KEYS - set(raw) - {"seed"}
    if missing:
        raise ConfigError(f"synth config is missing keys: {sorted(missing)}")
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    dirs = _out_dirs(args.out)
    ds, store = synth_generate(
        raw["n_users"], raw["n_items"], raw["d"], raw["signal_strength"], K.make_rng(seed)
    )
    write_interactions(ds, dirs["root"] / "interactions.tsv")
    write_feature_store(store, dirs["root"] / "features.bin")
    print(f"synth: {ds.n_users} users, {ds.n_items} items, "
          f"{ds.n_interactions} interactions, d={store.d} (seed={seed})")
    return 0


def cmd_pretrain(args) -> int:
    cfg, paths = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    ds, store = _load_data(paths)
    dirs = _out_dirs(args.out)
    _echo_config(cfg, paths, dirs["root"])
    state = T.pretrain(
        cfg, ds, store,
        checkpoint_path=dirs["checkpoints"] / "pretrain.ckpt",
        log_path=dirs["logs"] / "pretrain_log.csv",
    )
    print(f"pretrain: {state.epoch} epochs, final loss {state.log.rows[-1].train_loss:.6f}")
    return 0


def cmd_finetune(args) -> int:
    cfg, paths = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    ds, store = _load_data(paths)
    dirs = _out_dirs(args.out)
    _echo_config(cfg, paths, dirs["root"])
    init = None
    if args.init is not None:
        from .checkpoint import load_checkpoint

        init = load_checkpoint(args.init).tensors
    state = T.finetune(
        cfg, ds, store, init=init,
        checkpoint_path=dirs["checkpoints"] / "model.ckpt",
        log_path=dirs["logs"] / "finetune_log.csv",
    )
    split = leave_one_out_split(ds)
    feats = ItemFeatures.from_store(store, ds)
    cold, _ = cold_item_partition(split)
    report = E.evaluate(state.model, feats, split, "test", cold_items=cold,
                        cold_mode="cold-start" in cfg.variants)
    report.to_csv(dirs["reports"] / "metrics_test.csv")
    print(report.format_table(), end="")
    print(f"finetune: best val R@20 {state.best_val:.6f} at epoch {state.best_epoch}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, paths = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    ds, store = _load_data(paths)
    dirs = _out_dirs(args.out)
    if args.init is None:
        raise ConfigError("evaluate needs --init MODEL_CHECKPOINT")
    feats = ItemFeatures.from_store(store, ds)
    state, _ = T.load_state(args.init, feats)
    split = leave_one_out_split(ds)
    cold, _ = cold_item_partition(split)
    cold_mode = "cold-start" in cfg.variants
    for mode in ("valid", "test"):
        report = E.evaluate(state.model, feats, split, mode, cold_items=cold, cold_mode=cold_mode)
        report.to_csv(dirs["reports"] / f"metrics_{mode}.csv")
        print(report.format_table(), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg, paths = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    ds, store = _load_data(paths)
    dirs = _out_dirs(args.out)
    _echo_config(cfg, paths, dirs["root"])
    rows = T.ablation_table(cfg, ds, store, pretrain_epochs=args.pretrain_epochs)
    out = dirs["reports"] / "ablation.csv"
    metric_names = [k for k in rows[0] if k != "variant"]
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + metric_names)
        for r in rows:
            w.writerow([r["variant"]] + [f"{r[m]:.6f}" for m in metric_names])
    table = [["variant"] + metric_names] + [
        [r["variant"]] + [f"{r[m]:.4f}" for m in metric_names] for r in rows
    ]
    _print_table(table)
    print(f"ablate: {len(rows)} variants -> {out}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise ConfigError(f"no such report: {path}")
    rows = list(csv.reader(path.read_text(encoding="utf-8").splitlines()))
    if not rows:
        raise ConfigError(f"{path} is empty")
    _print_table(rows)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mp4sr", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="k-core filter and split manifest")
    p.add_argument("interactions", help="interactions TSV path")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a planted-signal dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune),
                     ("evaluate", cmd_evaluate)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        p.add_argument("--init", help="checkpoint to initialize from")
        p.add_argument("--variant", action="append", default=[])
        p.add_argument("--cold-start", action="store_true", dest="cold_start")
        p.set_defaults(fn=fn)

    p = sub.add_parser("ablate", help="run every in-scope variant")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", action="append", default=[])
    p.add_argument("--cold-start", action="store_true", dest="cold_start")
    p.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render a CSV report as a table")
    p.add_argument("path")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Mp4srError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
