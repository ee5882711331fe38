"""Cross-validated evaluation of the three-stage pipeline.

The harness owns everything between a feature store and a metrics report:
the per-layer linear probe, fold planning, per-fold training of the three
stages, artifact writing (checkpoints, stage logs, fold audit, metrics), and
split evaluation with optional fold ensembling. Fold work is independent by
construction (each stage draws its RNG from (seed, fold, stage)), so folds
may run in parallel when EMOFUSE_THREADS allows it.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import AdapterConfig, AdapterModel, extract_acoustic, train_adapter_stage
from .align import AlignConfig, VisionMLP, train_alignment_stage
from .data import LABEL_NAMES, FeatureStore, N_CLASSES
from .errors import ArgumentError, CheckpointError, ConfigError, DataError, DimensionError
from .fusion import (
    MODALITIES,
    FusionConfig,
    FusionModel,
    canonical_modalities,
    fusion_logits,
    predict,
    train_fusion_stage,
)
from .kernels import softmax_rows
from .metrics import format_mean_std, kfold_split, weighted_f1
from .numcore import as_f64

STAGE_ADAPTER, STAGE_ALIGN, STAGE_FUSION = 1, 2, 3


def stage_seed(seed: int, fold: int, stage: int) -> int:
    """Deterministic per-(run, fold, stage) seed, stable across platforms."""
    return int(np.random.SeedSequence((seed, fold, stage)).generate_state(1)[0])


def thread_budget(n_tasks: int) -> int:
    """Parallelism cap from EMOFUSE_THREADS (default 1 = sequential)."""
    raw = os.environ.get("EMOFUSE_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"EMOFUSE_THREADS must be an integer, got {raw!r}")
    return max(1, min(cap, n_tasks))


def _require_labeled(store: FeatureStore) -> np.ndarray:
    labeled = store.indices("labeled")
    if labeled.size == 0:
        raise DataError("store has no labeled samples; training and probing need labels")
    return labeled


def probe_layers(store: FeatureStore, n_folds: int = 5, seed: int = 0) -> list[dict]:
    """Per-layer linear-probe quality under k-fold CV.

    Each layer's features feed a one-layer least-squares classifier (closed
    form, no iterations); the report row carries the layer id, the fold-mean
    weighted F1, and the population std over folds.
    """
    labeled = _require_labeled(store)
    if n_folds < 2:
        raise ArgumentError(f"the probe needs at least 2 folds, got {n_folds}")
    if labeled.size < n_folds:
        raise ArgumentError(f"{labeled.size} labeled samples cannot fill {n_folds} folds")
    y = store.labels[labeled]
    onehot = np.eye(N_CLASSES)
    folds = kfold_split(np.arange(labeled.size), n_folds, seed)
    rows = []
    for li in range(store.k):
        x = as_f64(store.acoustic[labeled][:, li, :])
        aug = np.hstack([x, np.ones((x.shape[0], 1))])
        scores = []
        for f in range(n_folds):
            va = folds[f]
            tr = np.concatenate([folds[g] for g in range(n_folds) if g != f])
            w, *_ = np.linalg.lstsq(aug[tr], onehot[y[tr]], rcond=None)
            scores.append(weighted_f1(np.argmax(aug[va] @ w, axis=1), y[va]))
        rows.append(
            {
                "layer_id": store.layer_ids[li],
                "mean": float(np.mean(scores)),
                "std": float(np.std(scores)),
            }
        )
    return rows


def probe_peak(rows: list[dict]) -> int:
    """Index (stack slot, not layer id) of the best-scoring probe row."""
    return int(np.argmax([r["mean"] for r in rows]))


@dataclass
class CVConfig:
    folds: int = 5
    seed: int = 0
    modalities: tuple = MODALITIES
    skip_align: bool = False
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)


@dataclass
class FoldOutcome:
    fold: int
    wf1: float
    adapter: AdapterModel | None
    vision: VisionMLP | None
    fusion: FusionModel
    logs: dict


@dataclass
class CVOutcome:
    outcomes: list
    fold_plan: list  # (train sample ids, val sample ids) per fold

    @property
    def scores(self) -> list:
        return [o.wf1 for o in self.outcomes]

    def summary(self) -> str:
        return format_mean_std(self.scores)


def build_features(store: FeatureStore, idx, modalities, adapter=None, vision=None) -> dict:
    """Modality embeddings for the given store rows, via the frozen models."""
    feats = {}
    try:
        if "a" in modalities:
            if adapter is None:
                raise ArgumentError("acoustic features need an adapter model")
            feats["a"] = extract_acoustic(adapter, store.acoustic[idx])
        if "l" in modalities:
            feats["l"] = as_f64(store.lexical[idx])
        if "v" in modalities:
            if vision is None:
                raise ArgumentError("aligned visual features need a vision model")
            if adapter is None:
                raise ArgumentError("aligned visual features need an adapter model")
            feats["v"] = vision.forward(store.visual[idx])
    except DimensionError as exc:
        raise CheckpointError(f"checkpoint does not fit this store: {exc}") from exc
    return feats


def run_fold(store: FeatureStore, fold: int, train_rel, val_rel, cfg: CVConfig) -> FoldOutcome:
    """Train the configured stages on one fold; indices are labeled-relative."""
    mods = canonical_modalities(cfg.modalities)
    labeled = store.indices("labeled")
    logs = {}

    adapter = None
    if "a" in mods or "v" in mods:
        acfg = replace(cfg.adapter, seed=stage_seed(cfg.seed, fold, STAGE_ADAPTER))
        adapter, logs["stage1"] = train_adapter_stage(
            store.acoustic[labeled], store.labels[labeled], train_rel, val_rel, acfg, store.layer_ids
        )

    vision = None
    if "v" in mods:
        vseed = stage_seed(cfg.seed, fold, STAGE_ALIGN)
        if cfg.skip_align:
            vision = VisionMLP(store.d_v, store.d_a)
            vision.init_weights(np.random.default_rng(vseed), cfg.align.tau_init)
        else:
            unl = store.indices("unlabeled")
            if unl.size < 2:
                raise DataError(
                    "store has no unlabeled split for the alignment stage; "
                    "rerun with --skip-align to use an untrained visual projector"
                )
            vcfg = replace(cfg.align, seed=vseed)
            vision, logs["stage2"] = train_alignment_stage(
                store.visual[unl], store.acoustic[unl], adapter, vcfg
            )

    feats = build_features(store, labeled, mods, adapter, vision)
    fcfg = replace(cfg.fusion, modalities=mods, seed=stage_seed(cfg.seed, fold, STAGE_FUSION))
    fusion, logs["stage3"] = train_fusion_stage(
        feats, store.labels[labeled], train_rel, val_rel, fcfg, store.d_a, store.d_l
    )
    preds, _, _ = predict(fusion, {m: arr[val_rel] for m, arr in feats.items()})
    wf1 = weighted_f1(preds, store.labels[labeled][val_rel])
    return FoldOutcome(fold, wf1, adapter, vision, fusion, logs)


def run_cv(store: FeatureStore, cfg: CVConfig) -> CVOutcome:
    """Fold-disjoint CV over the labeled split; folds may run in parallel."""
    labeled = _require_labeled(store)
    if cfg.folds < 2:
        raise ArgumentError(f"cross-validation needs at least 2 folds, got {cfg.folds}")
    if labeled.size < cfg.folds:
        raise ArgumentError(f"{labeled.size} labeled samples cannot fill {cfg.folds} folds")
    folds = kfold_split(np.arange(labeled.size), cfg.folds, cfg.seed)
    plans = []
    ids = np.asarray(store.sample_ids, dtype=object)
    for f in range(cfg.folds):
        val_rel = folds[f]
        train_rel = np.concatenate([folds[g] for g in range(cfg.folds) if g != f])
        plans.append((train_rel, val_rel))

    def job(f):
        return run_fold(store, f, plans[f][0], plans[f][1], cfg)

    workers = thread_budget(cfg.folds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(job, range(cfg.folds)))
    else:
        outcomes = [job(f) for f in range(cfg.folds)]

    fold_plan = [
        (list(ids[labeled[tr]]), list(ids[labeled[va]])) for tr, va in plans
    ]
    return CVOutcome(outcomes, fold_plan)


def _fmt(x) -> str:
    return f"{float(x):.6f}"


def _write_stage1_log(path, log, k):
    with open(path, "w", encoding="utf-8") as fh:
        cols = ["epoch", "l_ce", "l_mlm", "l", "val_wf1"] + [f"w_{i}" for i in range(k)]
        fh.write("\t".join(cols) + "\n")
        for rec in log:
            vals = [str(rec["epoch"])] + [_fmt(rec[c]) for c in ("l_ce", "l_mlm", "l", "val_wf1")]
            vals += [_fmt(w) for w in rec["layer_weights"]]
            fh.write("\t".join(vals) + "\n")


def _write_stage2_log(path, log):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tl_ita\ttau\trecall_at_1\n")
        for rec in log:
            fh.write(
                "\t".join([str(rec["epoch"])] + [_fmt(rec[c]) for c in ("l_ita", "tau", "recall_at_1")])
                + "\n"
            )


def _write_stage3_log(path, log):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tl_ce\tval_wf1\talpha_a\talpha_l\talpha_v\n")
        for rec in log:
            vals = [str(rec["epoch"]), _fmt(rec["l_ce"]), _fmt(rec["val_wf1"])]
            vals += [_fmt(a) for a in rec["alpha"]]
            fh.write("\t".join(vals) + "\n")


def write_fold_audit(path, fold_plan):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fold\trole\tsample_id\n")
        for f, (train_ids, val_ids) in enumerate(fold_plan):
            for sid in train_ids:
                fh.write(f"{f}\ttrain\t{sid}\n")
            for sid in val_ids:
                fh.write(f"{f}\tval\t{sid}\n")


def audit_folds(path) -> dict:
    """Re-read a fold audit log and verify train/validation disjointness.

    Returns per-fold counts; raises DataError on any overlap, on a validation
    id that reappears in another fold's validation set, or on a malformed log.
    """
    train: dict[int, set] = {}
    val: dict[int, set] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "fold\trole\tsample_id":
            raise DataError(f"{path}: unrecognized fold audit header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
            f, role, sid = int(parts[0]), parts[1], parts[2]
            if role == "train":
                train.setdefault(f, set()).add(sid)
            elif role == "val":
                val.setdefault(f, set()).add(sid)
            else:
                raise DataError(f"{path}:{lineno}: unknown role {role!r}")
    counts = {}
    seen_val: dict[str, int] = {}
    for f in sorted(val):
        overlap = val[f] & train.get(f, set())
        if overlap:
            raise DataError(
                f"fold {f}: validation sample {sorted(overlap)[0]} appears in its own training set"
            )
        for sid in val[f]:
            if sid in seen_val:
                raise DataError(
                    f"sample {sid} is validation in folds {seen_val[sid]} and {f}"
                )
            seen_val[sid] = f
        counts[f] = {"train": len(train.get(f, set())), "val": len(val[f])}
    return counts


def write_metrics(path, cfg: CVConfig, scores) -> None:
    mods = ",".join(canonical_modalities(cfg.modalities))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# folds={cfg.folds}\tseed={cfg.seed}\tmodalities={mods}\n")
        fh.write("fold\tweighted_f1\n")
        for f, s in enumerate(scores):
            fh.write(f"{f}\t{_fmt(s)}\n")
        fh.write(f"# weighted_f1\t{format_mean_std(scores)}\n")


def write_run_artifacts(out_dir, store: FeatureStore, cfg: CVConfig, cv: CVOutcome) -> str:
    """Checkpoints, stage logs, fold audit, and the metrics table; returns the metrics path."""
    os.makedirs(out_dir, exist_ok=True)
    for o in cv.outcomes:
        if o.adapter is not None:
            o.adapter.save(os.path.join(out_dir, f"adapter_fold{o.fold}.emoc"))
            _write_stage1_log(os.path.join(out_dir, f"stage1_fold{o.fold}.tsv"), o.logs["stage1"], store.k)
        if o.vision is not None:
            o.vision.save(os.path.join(out_dir, f"vision_fold{o.fold}.emoc"))
            if "stage2" in o.logs:
                _write_stage2_log(os.path.join(out_dir, f"stage2_fold{o.fold}.tsv"), o.logs["stage2"])
        o.fusion.save(os.path.join(out_dir, f"fusion_fold{o.fold}.emoc"))
        _write_stage3_log(os.path.join(out_dir, f"stage3_fold{o.fold}.tsv"), o.logs["stage3"])
    write_fold_audit(os.path.join(out_dir, "folds.tsv"), cv.fold_plan)
    metrics_path = os.path.join(out_dir, "metrics.tsv")
    write_metrics(metrics_path, cfg, cv.scores)
    return metrics_path


def load_fold_models(run_dir, fold: int):
    """(adapter, vision, fusion) for one fold; absent stages come back None."""
    fusion_path = os.path.join(run_dir, f"fusion_fold{fold}.emoc")
    if not os.path.exists(fusion_path):
        raise DataError(f"{run_dir} has no fusion checkpoint for fold {fold}")
    fusion = FusionModel.load(fusion_path)
    adapter = None
    vision = None
    apath = os.path.join(run_dir, f"adapter_fold{fold}.emoc")
    if os.path.exists(apath):
        adapter = AdapterModel.load(apath)
    vpath = os.path.join(run_dir, f"vision_fold{fold}.emoc")
    if os.path.exists(vpath):
        vision = VisionMLP.load(vpath)
    return adapter, vision, fusion


def count_folds(run_dir) -> int:
    n = 0
    while os.path.exists(os.path.join(run_dir, f"fusion_fold{n}.emoc")):
        n += 1
    if n == 0:
        raise DataError(f"{run_dir} contains no fusion checkpoints")
    return n


def evaluate_split(store: FeatureStore, split: str, triples: list):
    """Predictions (and weighted F1 when the split is fully labeled).

    triples is a list of (adapter, vision, fusion); more than one means
    mean-logits ensembling, with attention averaged for reporting. Returns
    (rows, wf1 or None) where each row is
    (sample_id, label_name, probs[6], alpha[3]).
    """
    idx = store.indices(split)
    if idx.size == 0:
        raise DataError(f"store has no samples in split {split!r}")
    if not triples:
        raise ArgumentError("no models given")
    mods = triples[0][2].modalities
    for _, _, fus in triples[1:]:
        if fus.modalities != mods:
            raise CheckpointError(
                f"fold checkpoints disagree on modalities: {fus.modalities} vs {mods}"
            )
    logit_sum = None
    alpha_sum = None
    for adapter, vision, fusion in triples:
        feats = build_features(store, idx, mods, adapter, vision)
        logits = fusion_logits(fusion, feats)
        _, _, alpha = predict(fusion, feats)
        logit_sum = logits if logit_sum is None else logit_sum + logits
        alpha_sum = alpha if alpha_sum is None else alpha_sum + alpha
    logits = logit_sum / len(triples)
    alpha = alpha_sum / len(triples)
    probs = softmax_rows(logits)
    preds = np.argmax(logits, axis=1)

    rows = []
    for i, si in enumerate(idx):
        rows.append((store.sample_ids[si], LABEL_NAMES[preds[i]], probs[i], alpha[i]))
    labels = store.labels[idx]
    wf1 = weighted_f1(preds, labels) if (labels >= 0).all() else None
    return rows, wf1


def write_predictions(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        head = ["sample_id", "predicted_label"]
        head += [f"p_{i}" for i in range(N_CLASSES)]
        head += ["alpha_a", "alpha_l", "alpha_v"]
        fh.write("\t".join(head) + "\n")
        for sid, name, probs, alpha in rows:
            cells = [sid, name] + [_fmt(p) for p in probs] + [_fmt(a) for a in alpha]
            fh.write("\t".join(cells) + "\n")
