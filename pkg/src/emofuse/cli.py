"""Command-line front end.

Subcommands cover the whole workflow: synthetic data generation, the
per-layer probe, each training stage on its own, the cross-validated
pipeline, and evaluation/prediction dumps. Every value can come from three
places with fixed precedence: command-line flag, then JSON config file
(--config), then built-in default.

Exit codes: 0 success, 2 bad arguments or configuration, 3 data or format
problems, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .adapter import AdapterConfig, AdapterModel, train_adapter_stage
from .align import AlignConfig, VisionMLP, train_alignment_stage
from .data import LABEL_NAMES, read_store, write_store
from .errors import ArgumentError, ConfigError, DataError, EmofuseError, NumericError, OracleError
from .fusion import FusionConfig, canonical_modalities, train_fusion_stage
from .harness import (
    CVConfig,
    _write_stage1_log,
    _write_stage2_log,
    _write_stage3_log,
    audit_folds,
    build_features,
    count_folds,
    evaluate_split,
    load_fold_models,
    probe_layers,
    probe_peak,
    run_cv,
    write_predictions,
    write_run_artifacts,
)
from .synth import SyntheticConfig, generate_synthetic

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_GEN_KEYS = (
    "n_samples", "n_unlabeled", "n_test", "k", "peak_layer", "d_a", "d_v", "d_l",
    "d_latent", "snr_peak", "snr_decay", "rho_xm", "sigma", "class_sep", "jitter",
)
_KNOWN_KEYS = set(_GEN_KEYS) | {
    "seed", "folds", "modalities", "skip_align", "layer_ids", "val_fraction",
    "epochs", "patience", "batch_size", "lr", "weight_decay", "mask_ratio", "bottleneck",
    "align_epochs", "align_batch", "align_lr", "tau_init",
    "fusion_epochs", "fusion_batch", "fusion_lr", "d_h",
    "split", "ensemble",
}


class Settings:
    """Flag > config-file > default lookup for one parsed invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict = {}
        path = getattr(args, "config", None)
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    self.file = json.load(fh)
            except FileNotFoundError:
                raise DataError(f"config file not found: {path}")
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path} is not valid JSON: {exc}")
            if not isinstance(self.file, dict):
                raise ConfigError(f"{path} must hold a JSON object")
            unknown = set(self.file) - _KNOWN_KEYS
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def get(self, key: str, default=None):
        cli = getattr(self.args, key, None)
        if cli is not None:
            return cli
        if key in self.file:
            return self.file[key]
        return default


def _parse_modalities(raw) -> tuple:
    if isinstance(raw, (list, tuple)):
        return canonical_modalities(raw)
    return canonical_modalities(raw.replace(",", ""))


def _parse_layer_ids(raw) -> tuple:
    if isinstance(raw, (list, tuple)):
        return tuple(int(x) for x in raw)
    try:
        return tuple(int(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"layer ids must be comma-separated integers, got {raw!r}")


def _stage_configs(s: Settings):
    adapter = AdapterConfig(
        epochs=int(s.get("epochs", 100)),
        patience=int(s.get("patience", 10)),
        batch_size=int(s.get("batch_size", 16)),
        lr=float(s.get("lr", 1e-4)),
        weight_decay=float(s.get("weight_decay", 0.02)),
        mask_ratio=float(s.get("mask_ratio", 0.15)),
        bottleneck=None if s.get("bottleneck") is None else int(s.get("bottleneck")),
    )
    align = AlignConfig(
        epochs=int(s.get("align_epochs", 60)),
        batch_size=int(s.get("align_batch", 1024)),
        lr=float(s.get("align_lr", 3e-3)),
        weight_decay=float(s.get("weight_decay", 0.02)),
        tau_init=float(s.get("tau_init", 0.07)),
    )
    fusion = FusionConfig(
        epochs=int(s.get("fusion_epochs", 50)),
        patience=int(s.get("patience", 10)),
        batch_size=int(s.get("fusion_batch", 16)),
        lr=float(s.get("fusion_lr", 1e-4)),
        weight_decay=float(s.get("weight_decay", 0.02)),
        d_h=int(s.get("d_h", 256)),
    )
    return adapter, align, fusion


def _read_store(s: Settings):
    path = s.args.store
    if not os.path.exists(path):
        raise DataError(f"feature store not found: {path}")
    return read_store(path)


def _train_val_split(n: int, val_fraction: float, seed: int):
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val fraction must lie in (0, 1), got {val_fraction}")
    if n < 2:
        raise DataError(f"need at least 2 labeled samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    if n_val >= n:
        n_val = n - 1
    return perm[n_val:], perm[:n_val]


def cmd_gen_data(s: Settings) -> int:
    kwargs = {}
    for key in _GEN_KEYS:
        val = s.get(key)
        if val is not None:
            caster = float if key in ("snr_peak", "snr_decay", "rho_xm", "sigma", "class_sep", "jitter") else int
            kwargs[key] = caster(val)
    if s.get("layer_ids") is not None:
        kwargs["layer_ids"] = _parse_layer_ids(s.get("layer_ids"))
        kwargs.setdefault("k", len(kwargs["layer_ids"]))
    elif "k" in kwargs:
        kwargs["layer_ids"] = tuple(range(16, 16 + kwargs["k"]))
    cfg = SyntheticConfig(seed=int(s.get("seed", 0)), **kwargs)
    store = generate_synthetic(cfg)
    write_store(store, s.args.out)
    hist = {name: int((store.labels == i).sum()) for i, name in enumerate(LABEL_NAMES)}
    print(f"wrote {s.args.out}: n={store.n} k={store.k} d_a={store.d_a} d_v={store.d_v} d_l={store.d_l}")
    print("labels: " + ", ".join(f"{k}={v}" for k, v in hist.items()))
    return EXIT_OK


def cmd_probe_layers(s: Settings) -> int:
    store = _read_store(s)
    rows = probe_layers(store, int(s.get("folds", 5)), int(s.get("seed", 0)))
    peak = probe_peak(rows)
    lines = ["layer_id\tmean_wf1\tstd_wf1\tpeak"]
    for i, r in enumerate(rows):
        mark = "*" if i == peak else ""
        lines.append(f"{r['layer_id']}\t{r['mean']:.6f}\t{r['std']:.6f}\t{mark}")
    report = "\n".join(lines) + "\n"
    if s.args.out:
        with open(s.args.out, "w", encoding="utf-8") as fh:
            fh.write(report)
    print(report, end="")
    print(f"peak layer_id: {rows[peak]['layer_id']}")
    return EXIT_OK


def cmd_train_adapter(s: Settings) -> int:
    store = _read_store(s)
    labeled = store.indices("labeled")
    if labeled.size == 0:
        raise DataError("store has no labeled samples to train on")
    seed = int(s.get("seed", 0))
    adapter_cfg, _, _ = _stage_configs(s)
    adapter_cfg.seed = seed
    tr, va = _train_val_split(labeled.size, float(s.get("val_fraction", 0.2)), seed)
    model, log = train_adapter_stage(
        store.acoustic[labeled], store.labels[labeled], tr, va, adapter_cfg, store.layer_ids
    )
    os.makedirs(s.args.out, exist_ok=True)
    model.save(os.path.join(s.args.out, "adapter.emoc"))
    _write_stage1_log(os.path.join(s.args.out, "stage1.tsv"), log, store.k)
    best = max(e["val_wf1"] for e in log)
    print(f"adapter trained: {len(log)} epochs, best val weighted_f1 {best:.4f}")
    print(f"wrote {os.path.join(s.args.out, 'adapter.emoc')}")
    return EXIT_OK


def cmd_align_vision(s: Settings) -> int:
    store = _read_store(s)
    if not s.args.adapter_ckpt:
        raise ConfigError("--adapter-ckpt is required to align visual features")
    adapter = AdapterModel.load(s.args.adapter_ckpt)
    unl = store.indices("unlabeled")
    if unl.size < 2:
        raise DataError("store has no unlabeled split to align on")
    _, align_cfg, _ = _stage_configs(s)
    align_cfg.seed = int(s.get("seed", 0))
    model, log = train_alignment_stage(store.visual[unl], store.acoustic[unl], adapter, align_cfg)
    os.makedirs(s.args.out, exist_ok=True)
    model.save(os.path.join(s.args.out, "vision.emoc"))
    _write_stage2_log(os.path.join(s.args.out, "stage2.tsv"), log)
    print(f"vision aligned: {len(log)} epochs, final in-batch recall@1 {log[-1]['recall_at_1']:.4f}")
    print(f"wrote {os.path.join(s.args.out, 'vision.emoc')}")
    return EXIT_OK


def cmd_train_fusion(s: Settings) -> int:
    store = _read_store(s)
    labeled = store.indices("labeled")
    if labeled.size == 0:
        raise DataError("store has no labeled samples to train on")
    mods = _parse_modalities(s.get("modalities", "a,l,v"))
    adapter = AdapterModel.load(s.args.adapter_ckpt) if s.args.adapter_ckpt else None
    vision = VisionMLP.load(s.args.vision_ckpt) if s.args.vision_ckpt else None
    feats = build_features(store, labeled, mods, adapter, vision)
    seed = int(s.get("seed", 0))
    _, _, fusion_cfg = _stage_configs(s)
    fusion_cfg.seed = seed
    fusion_cfg.modalities = mods
    tr, va = _train_val_split(labeled.size, float(s.get("val_fraction", 0.2)), seed)
    model, log = train_fusion_stage(feats, store.labels[labeled], tr, va, fusion_cfg, store.d_a, store.d_l)
    os.makedirs(s.args.out, exist_ok=True)
    model.save(os.path.join(s.args.out, "fusion.emoc"))
    _write_stage3_log(os.path.join(s.args.out, "stage3.tsv"), log)
    best = max(e["val_wf1"] for e in log)
    print(f"fusion trained on {'+'.join(mods)}: {len(log)} epochs, best val weighted_f1 {best:.4f}")
    print(f"wrote {os.path.join(s.args.out, 'fusion.emoc')}")
    return EXIT_OK


def _cv_config(s: Settings) -> CVConfig:
    adapter, align, fusion = _stage_configs(s)
    return CVConfig(
        folds=int(s.get("folds", 5)),
        seed=int(s.get("seed", 0)),
        modalities=_parse_modalities(s.get("modalities", "a,l,v")),
        skip_align=bool(s.get("skip_align", False)),
        adapter=adapter,
        align=align,
        fusion=fusion,
    )


def _run_cv_command(s: Settings) -> int:
    store = _read_store(s)
    cfg = _cv_config(s)
    cv = run_cv(store, cfg)
    write_run_artifacts(s.args.out, store, cfg, cv)
    audit_folds(os.path.join(s.args.out, "folds.tsv"))
    for o in cv.outcomes:
        print(f"fold {o.fold}: weighted_f1 {o.wf1:.4f}")
    print(f"weighted_f1 {cv.summary()} over {cfg.folds} folds ({'+'.join(cfg.modalities)})")
    print("fold audit: ok")
    print(f"wrote {os.path.join(s.args.out, 'metrics.tsv')}")
    return EXIT_OK


def cmd_pipeline(s: Settings) -> int:
    return _run_cv_command(s)


def cmd_cv(s: Settings) -> int:
    return _run_cv_command(s)


def cmd_evaluate(s: Settings) -> int:
    store = _read_store(s)
    run_dir = s.args.run_dir
    if not run_dir or not os.path.isdir(run_dir):
        raise DataError(f"run directory not found: {run_dir}")
    split = s.get("split", "test")
    ensemble = s.get("ensemble", "none")
    if ensemble not in ("none", "mean-logits"):
        raise ConfigError(f"unknown ensemble mode {ensemble!r}")
    if ensemble == "mean-logits":
        triples = [load_fold_models(run_dir, f) for f in range(count_folds(run_dir))]
    else:
        triples = [load_fold_models(run_dir, 0)]
    rows, wf1 = evaluate_split(store, split, triples)
    out = s.args.out or os.path.join(run_dir, f"predictions_{split}.tsv")
    write_predictions(out, rows)
    print(f"wrote {out} ({len(rows)} predictions)")
    if wf1 is None:
        print(f"split {split!r} has no labels; predictions only")
    else:
        print(f"weighted_f1 {wf1:.4f}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emofuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, store=True, out_required=True):
        if store:
            p.add_argument("--store", required=True, help="feature store (.emof)")
        p.add_argument("--out", required=out_required, help="output path")
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="JSON config file (flags override it)")

    g = sub.add_parser("gen-data", help="generate a synthetic feature store")
    common(g, store=False)
    for key in _GEN_KEYS:
        flag = "--" + key.replace("_", "-")
        typ = float if key in ("snr_peak", "snr_decay", "rho_xm", "sigma", "class_sep", "jitter") else int
        g.add_argument(flag, type=typ, dest=key)
    g.add_argument("--layer-ids", dest="layer_ids", help="comma-separated layer ids")

    p = sub.add_parser("probe-layers", help="per-layer linear probe report")
    common(p, out_required=False)
    p.add_argument("--folds", type=int)

    def stage1_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", type=float, dest="weight_decay")
        p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
        p.add_argument("--bottleneck", type=int)

    def stage2_flags(p):
        p.add_argument("--align-epochs", type=int, dest="align_epochs")
        p.add_argument("--align-batch", type=int, dest="align_batch")
        p.add_argument("--align-lr", type=float, dest="align_lr")
        p.add_argument("--tau-init", type=float, dest="tau_init")

    def stage3_flags(p):
        p.add_argument("--fusion-epochs", type=int, dest="fusion_epochs")
        p.add_argument("--fusion-batch", type=int, dest="fusion_batch")
        p.add_argument("--fusion-lr", type=float, dest="fusion_lr")
        p.add_argument("--d-h", type=int, dest="d_h")

    t = sub.add_parser("train-adapter", help="stage 1 on the labeled split")
    common(t)
    stage1_flags(t)
    t.add_argument("--val-fraction", type=float, dest="val_fraction")

    a = sub.add_parser("align-vision", help="stage 2 on the unlabeled split")
    common(a)
    a.add_argument("--adapter-ckpt", dest="adapter_ckpt", required=True)
    stage2_flags(a)

    f = sub.add_parser("train-fusion", help="stage 3 on the labeled split")
    common(f)
    f.add_argument("--adapter-ckpt", dest="adapter_ckpt")
    f.add_argument("--vision-ckpt", dest="vision_ckpt")
    f.add_argument("--modalities", help="subset of a,l,v")
    f.add_argument("--val-fraction", type=float, dest="val_fraction")
    stage3_flags(f)

    for name, help_text in (
        ("pipeline", "all stages under fold-disjoint cross-validation"),
        ("cv", "cross-validated scores for one configuration"),
    ):
        c = sub.add_parser(name, help=help_text)
        common(c)
        c.add_argument("--folds", type=int)
        c.add_argument("--modalities", help="subset of a,l,v")
        c.add_argument("--skip-align", action="store_const", const=True, dest="skip_align")
        stage1_flags(c)
        stage2_flags(c)
        stage3_flags(c)

    e = sub.add_parser("evaluate", help="prediction dump (and score when labels exist)")
    common(e, out_required=False)
    e.add_argument("--run-dir", dest="run_dir", required=True)
    e.add_argument("--split", choices=("labeled", "unlabeled", "test"))
    e.add_argument("--ensemble", choices=("none", "mean-logits"))
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "probe-layers": cmd_probe_layers,
    "train-adapter": cmd_train_adapter,
    "align-vision": cmd_align_vision,
    "train-fusion": cmd_train_fusion,
    "pipeline": cmd_pipeline,
    "cv": cmd_cv,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed its message
        return int(exc.code or 0)
    try:
        settings = Settings(args)
        return _COMMANDS[args.command](settings)
    except (NumericError, OracleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArgumentError as exc:  # covers ConfigError and DimensionError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EmofuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
