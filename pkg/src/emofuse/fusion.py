"""Stage 3: attention fusion of per-modality embeddings into emotion logits.

Each modality is projected to a common width by its own two-layer MLP
(interior ReLU, linear output). A scoring vector shared across modalities
turns the projections into softmax attention weights; their weighted sum
feeds a linear classifier over the six emotion classes. Aligned visual
features arrive in the acoustic width (they are outputs of the stage-2
projector); lexical features keep their native width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import N_CLASSES, load_checkpoint, save_checkpoint
from .errors import ArgumentError, CheckpointError, ConfigError, DataError, DimensionError
from .metrics import weighted_f1
from .numcore import AdamState, ParamSet, adam_step, as_f64

MODALITIES = ("a", "l", "v")  # canonical attention order: acoustic, lexical, visual


def canonical_modalities(mods) -> tuple:
    """Validate a modality subset and return it in canonical order."""
    given = list(mods)
    unknown = [m for m in given if m not in MODALITIES]
    if unknown:
        raise ArgumentError(f"unknown modality tag '{unknown[0]}'")
    if len(set(given)) != len(given):
        raise ArgumentError(f"duplicate modality tags in {given}")
    if not given:
        raise ConfigError("at least one modality must be configured")
    return tuple(m for m in MODALITIES if m in given)


@dataclass
class FusionConfig:
    epochs: int = 50
    patience: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.02
    d_h: int = 256
    modalities: tuple = MODALITIES
    seed: int = 0


class FusionModel:
    KIND = "fusion"

    def __init__(self, d_a, d_l, d_h=256, modalities=MODALITIES):
        if d_a < 1 or d_l < 1 or d_h < 1:
            raise ConfigError(f"widths must be positive, got d_a={d_a}, d_l={d_l}, d_h={d_h}")
        self.d_a = d_a
        self.d_l = d_l
        self.d_h = d_h
        self.modalities = canonical_modalities(modalities)
        self.params = ParamSet()
        # every modality keeps its projection even when not configured, so a
        # checkpoint trained on a subset stays loadable under any other subset
        for m in MODALITIES:
            din = self.input_width(m)
            self.params.add(f"proj_{m}/w1", np.zeros((din, d_h)))
            self.params.add(f"proj_{m}/b1", np.zeros(d_h))
            self.params.add(f"proj_{m}/w2", np.zeros((d_h, d_h)))
            self.params.add(f"proj_{m}/b2", np.zeros(d_h))
        self.params.add("attn/w", np.zeros(d_h))
        self.params.add("attn/b", np.zeros(1))
        self.params.add("classifier/w", np.zeros((d_h, N_CLASSES)))
        self.params.add("classifier/b", np.zeros(N_CLASSES))

    def input_width(self, m: str) -> int:
        if m in ("a", "v"):
            return self.d_a
        if m == "l":
            return self.d_l
        raise ArgumentError(f"unknown modality tag '{m}'")

    def trainable_names(self) -> tuple:
        names = []
        for m in self.modalities:
            names += [f"proj_{m}/{t}" for t in ("w1", "b1", "w2", "b2")]
        return tuple(names) + ("attn/w", "attn/b", "classifier/w", "classifier/b")

    def init_weights(self, rng):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices, zero biases."""
        for name in self.params.names():
            t = self.params[name]
            if t.ndim == 2:
                t[...] = rng.uniform(-1, 1, t.shape) / np.sqrt(t.shape[0])
            else:
                t[...] = 0.0
        w = self.params["attn/w"]
        w[...] = rng.uniform(-1, 1, w.shape) / np.sqrt(self.d_h)
        return self

    def project(self, m: str, x):
        """Two-layer projection of one vector or a batch to width d_h."""
        din = self.input_width(m)
        x = as_f64(x)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != din:
            raise DimensionError(
                f"modality '{m}' input has dimension {x.shape[1]}, expected {din}"
            )
        p = self.params
        h, _, _ = kernels.mlp2_forward(
            x, p[f"proj_{m}/w1"], p[f"proj_{m}/b1"], p[f"proj_{m}/w2"], p[f"proj_{m}/b2"], False
        )
        return h[0] if single else h

    def copy(self) -> "FusionModel":
        dup = FusionModel(self.d_a, self.d_l, self.d_h, self.modalities)
        dup.params.load_values({n: self.params[n] for n in self.params.names()})
        return dup

    def save(self, path):
        dims = {"d_a": self.d_a, "d_l": self.d_l, "d_h": self.d_h, "n_classes": N_CLASSES}
        extras = {"modalities": list(self.modalities)}
        save_checkpoint(path, self.KIND, dims, {n: self.params[n] for n in self.params.names()}, extras)

    @classmethod
    def load(cls, path) -> "FusionModel":
        ck = load_checkpoint(path, expect_kind=cls.KIND)
        model = cls(
            ck.dims["d_a"],
            ck.dims["d_l"],
            ck.dims["d_h"],
            tuple(ck.extras.get("modalities", MODALITIES)),
        )
        try:
            model.params.load_values(ck.tensors)
        except (ArgumentError, DimensionError) as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        return model


def project_modality(f_m, model: FusionModel, m: str):
    return model.project(m, f_m)


def _pad_alpha(model: FusionModel, alpha: np.ndarray) -> np.ndarray:
    """Expand an attention matrix over configured modalities to all 3 slots."""
    full = np.zeros(alpha.shape[:-1] + (len(MODALITIES),))
    for j, m in enumerate(model.modalities):
        full[..., MODALITIES.index(m)] = alpha[..., j]
    return full


def _checked_batch(model: FusionModel, feats: dict):
    """Validate a modality->array batch against the configured subset."""
    extra = set(feats) - set(model.modalities)
    if extra:
        raise ArgumentError(
            f"modality '{sorted(extra)[0]}' given but the model is configured for "
            f"{'/'.join(model.modalities)}"
        )
    arrays = {}
    b = None
    for m in model.modalities:
        if m not in feats or feats[m] is None:
            raise DataError(f"modality '{m}' missing from the batch and no imputation is configured")
        x = as_f64(feats[m])
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != model.input_width(m):
            raise DimensionError(
                f"modality '{m}' has shape {np.shape(feats[m])}, expected (*, {model.input_width(m)})"
            )
        if b is None:
            b = x.shape[0]
        elif x.shape[0] != b:
            raise DimensionError(f"modality '{m}' has {x.shape[0]} rows, others have {b}")
        arrays[m] = x
    return arrays, b


def _forward(model: FusionModel, arrays: dict):
    """Projections, attention, classifier; returns everything backward needs."""
    p = model.params
    hs, caches = [], []
    for m in model.modalities:
        h, z1, z2 = kernels.mlp2_forward(
            arrays[m], p[f"proj_{m}/w1"], p[f"proj_{m}/b1"], p[f"proj_{m}/w2"], p[f"proj_{m}/b2"], False
        )
        hs.append(h)
        caches.append((z1, z2))
    e = np.stack([h @ p["attn/w"] + p["attn/b"][0] for h in hs], axis=1)
    alpha = kernels.softmax_rows(e)
    z = np.einsum("bj,jbd->bd", alpha, np.stack(hs))
    logits = z @ p["classifier/w"] + p["classifier/b"]
    return logits, z, alpha, hs, caches


def attention_fuse(model: FusionModel, h_a=None, h_l=None, h_v=None):
    """Score, normalize, and mix projected embeddings.

    Configured modalities must all be given; others must be None. Accepts
    single vectors or batches. Returns (z, alpha) with alpha always padded to
    the canonical 3 slots (zeros for modalities outside the subset).
    """
    given = {"a": h_a, "l": h_l, "v": h_v}
    for m, h in given.items():
        if h is not None and m not in model.modalities:
            raise ArgumentError(f"modality '{m}' given but the model is configured for "
                                f"{'/'.join(model.modalities)}")
    hs = []
    single = False
    for m in model.modalities:
        if given[m] is None:
            raise ArgumentError(f"configured modality '{m}' not given")
        h = as_f64(given[m])
        if h.ndim == 1:
            h = h[None, :]
            single = True
        if h.shape[1] != model.d_h:
            raise DimensionError(f"h_{m} has width {h.shape[1]}, expected d_h={model.d_h}")
        hs.append(h)
    if len({h.shape[0] for h in hs}) != 1:
        raise DimensionError("projected modalities disagree on batch size")
    p = model.params
    e = np.stack([h @ p["attn/w"] + p["attn/b"][0] for h in hs], axis=1)
    alpha = kernels.softmax_rows(e)
    z = np.einsum("bj,jbd->bd", alpha, np.stack(hs))
    full = _pad_alpha(model, alpha)
    return (z[0], full[0]) if single else (z, full)


def fusion_logits(model: FusionModel, feats: dict) -> np.ndarray:
    arrays, _ = _checked_batch(model, feats)
    logits, _, _, _, _ = _forward(model, arrays)
    return logits


def predict(model: FusionModel, feats: dict):
    """Batch prediction: (labels, class probabilities, attention weights).

    Ties in the logits resolve to the lowest class index. Attention comes
    back padded to the canonical (a, l, v) order.
    """
    arrays, _ = _checked_batch(model, feats)
    logits, _, alpha, _, _ = _forward(model, arrays)
    probs = kernels.softmax_rows(logits)
    return np.argmax(logits, axis=1), probs, _pad_alpha(model, alpha)


def fusion_loss(model: FusionModel, feats: dict, labels, sample_ids=None) -> float:
    """Batch-mean CE of classifier(z); accumulates gradients into model.params.

    Only configured modalities receive gradient; the others stay untouched.
    """
    arrays, b = _checked_batch(model, feats)
    if b == 0:
        raise ArgumentError("empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for batch of {b}")
    for i, lbl in enumerate(labels):
        if not 0 <= lbl < N_CLASSES:
            sid = sample_ids[i] if sample_ids is not None else f"batch row {i}"
            raise DataError(f"sample {sid} has no usable label (got {lbl})")

    p = model.params
    logits, z, alpha, hs, caches = _forward(model, arrays)
    loss, dlogits = kernels.softmax_xent(logits, labels)

    p.accumulate("classifier/w", z.T @ dlogits)
    p.accumulate("classifier/b", dlogits.sum(axis=0))
    dz = dlogits @ p["classifier/w"].T

    # z = sum_j alpha_j h_j with e_j = h_j . w + b and alpha = softmax(e)
    dalpha = np.stack([(dz * h).sum(axis=1) for h in hs], axis=1)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    p.accumulate("attn/w", sum(h.T @ de[:, j] for j, h in enumerate(hs)))
    p.accumulate("attn/b", np.array([de.sum()]))
    for j, m in enumerate(model.modalities):
        dh = alpha[:, j, None] * dz + de[:, j, None] * p["attn/w"][None, :]
        z1, z2 = caches[j]
        _, dw1, db1, dw2, db2 = kernels.mlp2_backward(
            dh, arrays[m], z1, z2, p[f"proj_{m}/w1"], p[f"proj_{m}/w2"], False
        )
        p.accumulate(f"proj_{m}/w1", dw1)
        p.accumulate(f"proj_{m}/b1", db1)
        p.accumulate(f"proj_{m}/w2", dw2)
        p.accumulate(f"proj_{m}/b2", db2)
    return loss


def _subset_rows(feats: dict, idx) -> dict:
    return {m: arr[idx] for m, arr in feats.items()}


def train_fusion_stage(feats, labels, train_idx, val_idx, cfg: FusionConfig, d_a, d_l):
    """Minibatch Adam on fusion_loss; keeps the best-validation model.

    feats maps each configured modality to its full (n, width) embedding
    matrix; upstream models are already applied and stay frozen. Returns
    (model, log) with one record per epoch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ConfigError("empty training set")
    if val_idx.size == 0:
        raise ConfigError("empty validation set")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {cfg.batch_size}")
    if cfg.epochs < 1:
        raise ConfigError(f"epochs must be positive, got {cfg.epochs}")

    model = FusionModel(d_a, d_l, cfg.d_h, cfg.modalities)
    feats = {m: as_f64(arr) for m, arr in feats.items()}
    _checked_batch(model, feats)
    rng = np.random.default_rng(cfg.seed)
    model.init_weights(rng)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    trainable = model.trainable_names()

    best_f1 = -1.0
    best_params = None
    stale = 0
    log = []
    val_feats = _subset_rows(feats, val_idx)
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        loss_sum = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            model.params.zero_grad()
            loss = fusion_loss(model, _subset_rows(feats, batch), labels[batch])
            adam_step(model.params, opt, trainable)
            loss_sum += loss * batch.size
        preds, _, alpha = predict(model, val_feats)
        val_f1 = weighted_f1(preds, labels[val_idx])
        log.append(
            {
                "epoch": epoch,
                "l_ce": loss_sum / order.size,
                "val_wf1": val_f1,
                "alpha": alpha.mean(axis=0),
            }
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_params = {nm: model.params[nm].copy() for nm in model.params.names()}
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break

    model.params.load_values(best_params)
    return model, log
