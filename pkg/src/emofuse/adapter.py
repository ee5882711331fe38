"""Stage 1: residual bottleneck adapters over stacked acoustic layer features.

Each of the k layer vectors passes through its own adapter, the outputs are
combined with learnable layer weights, and the fused vector is trained under
a joint objective: classify the (reconstructed) fused feature into one of six
emotion classes, and reconstruct the fused feature from a randomly
coordinate-masked copy of itself. All gradients are closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import N_CLASSES, load_checkpoint, save_checkpoint
from .errors import ArgumentError, CheckpointError, ConfigError, DataError, DimensionError
from .metrics import weighted_f1
from .numcore import AdamState, ParamSet, adam_step, as_f64


@dataclass
class AdapterConfig:
    epochs: int = 100
    patience: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.02
    mask_ratio: float = 0.15
    bottleneck: int | None = None  # None: min(128, d_a // 2)
    stop_grad_target: bool = True
    init_weight_position: int | None = None  # None: slot of layer id 18, else middle
    seed: int = 0


def _mask_count(d: int, ratio: float) -> int:
    # round half up, so d=4 at ratio 0.5 masks exactly 2 coordinates
    return int(np.floor(ratio * d + 0.5))


def mask_features(f, ratio: float, rng):
    """Zero round(ratio*d) uniformly chosen coordinates of a feature vector.

    Returns the masked copy and the sorted masked index set.
    """
    if not 0.0 <= ratio < 1.0:
        raise ArgumentError(f"mask ratio must lie in [0, 1), got {ratio}")
    f = np.asarray(f)
    d = f.shape[-1]
    count = _mask_count(d, ratio)
    idx = np.sort(rng.choice(d, size=count, replace=False)) if count else np.empty(0, np.int64)
    masked = f.copy()
    masked[..., idx] = 0.0
    return masked, idx


def _mask_matrix(b: int, d: int, ratio: float, rng) -> np.ndarray:
    """Per-row keep/zero matrix with exactly round(ratio*d) zeros per row."""
    m = np.ones((b, d))
    count = _mask_count(d, ratio)
    if count:
        for i in range(b):
            m[i, rng.choice(d, size=count, replace=False)] = 0.0
    return m


def adapter_apply(x, w_down, b_down, w_up, b_up):
    """Residual bottleneck on one vector or a batch: y = x + relu(relu(x Wd + bd) Wu + bu)."""
    x = as_f64(x)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != w_down.shape[0]:
        raise DimensionError(
            f"input dimension {x.shape[1]} does not match adapter width {w_down.shape[0]}"
        )
    y, _, _ = kernels.adapter_forward(x, w_down, b_down, w_up, b_up)
    return y[0] if single else y


def layer_fuse(stack, weights):
    """Weighted sum over the layer axis: (k, d) or (B, k, d) -> (d,) or (B, d)."""
    stack = as_f64(stack)
    weights = as_f64(weights)
    if stack.shape[-2] != weights.shape[0]:
        raise DimensionError(
            f"stack has {stack.shape[-2]} layers but {weights.shape[0]} weights given"
        )
    return np.tensordot(weights, stack, axes=(0, -2)) if stack.ndim == 2 else np.einsum(
        "i,bid->bd", weights, stack
    )


class AdapterModel:
    KIND = "adapter"

    def __init__(self, k, d_a, d_hidden, layer_ids, mask_ratio=0.15, stop_grad_target=True):
        if d_hidden < 1 or d_hidden >= d_a:
            raise ConfigError(f"bottleneck width {d_hidden} must lie in 1..{d_a - 1}")
        if len(layer_ids) != k:
            raise ConfigError(f"{len(layer_ids)} layer ids for k={k}")
        if not 0.0 <= mask_ratio < 1.0:
            raise ConfigError(f"mask ratio must lie in [0, 1), got {mask_ratio}")
        self.k = k
        self.d_a = d_a
        self.d_hidden = d_hidden
        self.layer_ids = tuple(int(x) for x in layer_ids)
        self.mask_ratio = mask_ratio
        self.stop_grad_target = stop_grad_target
        self.params = ParamSet()
        for i in range(k):
            self.params.add(f"adapter{i}/w_down", np.zeros((d_a, d_hidden)))
            self.params.add(f"adapter{i}/b_down", np.zeros(d_hidden))
            self.params.add(f"adapter{i}/w_up", np.zeros((d_hidden, d_a)))
            self.params.add(f"adapter{i}/b_up", np.zeros(d_a))
        self.params.add("layer_weights", np.zeros(k))
        self.params.add("recon/w1", np.zeros((d_a, d_a)))
        self.params.add("recon/b1", np.zeros(d_a))
        self.params.add("recon/w2", np.zeros((d_a, d_a)))
        self.params.add("recon/b2", np.zeros(d_a))
        self.params.add("classifier/w", np.zeros((d_a, N_CLASSES)))
        self.params.add("classifier/b", np.zeros(N_CLASSES))

    def init_weights(self, rng, weight_position: int):
        """Uniform(-1/sqrt(d_a), 1/sqrt(d_a)) matrices, zero biases, one-hot layer weights."""
        if not 0 <= weight_position < self.k:
            raise ConfigError(f"initial weight position {weight_position} out of range 0..{self.k - 1}")
        bound = 1.0 / np.sqrt(self.d_a)
        for name in self.params.names():
            t = self.params[name]
            if t.ndim == 2:
                t[...] = rng.uniform(-bound, bound, t.shape)
            else:
                t[...] = 0.0
        w = self.params["layer_weights"]
        w[...] = 0.0
        w[weight_position] = 1.0
        return self

    def _stack_checked(self, x):
        x = as_f64(x)
        single = x.ndim == 2
        if single:
            x = x[None, ...]
        if x.ndim != 3 or x.shape[1] != self.k or x.shape[2] != self.d_a:
            raise DimensionError(
                f"expected layer stack of shape (*, {self.k}, {self.d_a}), got {x.shape}"
            )
        return x, single

    def adapt_and_fuse(self, x):
        """adapters + weighted fuse; returns (fusion, per-layer outputs, caches)."""
        x, _ = self._stack_checked(x)
        b = x.shape[0]
        ys = np.empty((b, self.k, self.d_a))
        caches = []
        for i in range(self.k):
            y, z1, z2 = kernels.adapter_forward(
                np.ascontiguousarray(x[:, i, :]),
                self.params[f"adapter{i}/w_down"],
                self.params[f"adapter{i}/b_down"],
                self.params[f"adapter{i}/w_up"],
                self.params[f"adapter{i}/b_up"],
            )
            ys[:, i, :] = y
            caches.append((z1, z2))
        fusion = np.einsum("i,bid->bd", self.params["layer_weights"], ys)
        return fusion, ys, caches

    def recon(self, v):
        out, _, _ = kernels.mlp2_forward(
            v,
            self.params["recon/w1"],
            self.params["recon/b1"],
            self.params["recon/w2"],
            self.params["recon/b2"],
            False,
        )
        return out

    def logits(self, x):
        """Evaluation path: adapters -> fuse -> reconstruction MLP -> classifier, no masking."""
        fusion, _, _ = self.adapt_and_fuse(x)
        h = self.recon(fusion)
        return h @ self.params["classifier/w"] + self.params["classifier/b"]

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def copy(self) -> "AdapterModel":
        dup = AdapterModel(
            self.k, self.d_a, self.d_hidden, self.layer_ids, self.mask_ratio, self.stop_grad_target
        )
        dup.params.load_values({n: self.params[n] for n in self.params.names()})
        return dup

    def save(self, path):
        dims = {"k": self.k, "d_a": self.d_a, "d_hidden": self.d_hidden, "n_classes": N_CLASSES}
        extras = {
            "layer_ids": list(self.layer_ids),
            "mask_ratio": self.mask_ratio,
            "stop_grad_target": self.stop_grad_target,
        }
        save_checkpoint(path, self.KIND, dims, {n: self.params[n] for n in self.params.names()}, extras)

    @classmethod
    def load(cls, path) -> "AdapterModel":
        ck = load_checkpoint(path, expect_kind=cls.KIND)
        ex = ck.extras
        model = cls(
            ck.dims["k"],
            ck.dims["d_a"],
            ck.dims["d_hidden"],
            tuple(ex["layer_ids"]),
            ex.get("mask_ratio", 0.15),
            ex.get("stop_grad_target", True),
        )
        try:
            model.params.load_values(ck.tensors)
        except (ArgumentError, DimensionError) as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        return model


def extract_acoustic(model: AdapterModel, stack) -> np.ndarray:
    """Adapters + layer fuse only; the embedding consumed by stages 2 and 3."""
    arr = as_f64(stack)
    single = arr.ndim == 2
    fusion, _, _ = model.adapt_and_fuse(arr)
    return fusion[0] if single else fusion


def adapter_loss(model: AdapterModel, x, labels, rng, sample_ids=None, mse_target=None):
    """Joint objective on one batch; accumulates gradients into model.params.

    Returns (l_ce, l_mlm, l) with l == l_ce + l_mlm exactly. The MSE target is
    the unmasked fused feature, held constant unless stop_grad_target is off.
    mse_target overrides the target with a fixed array; gradient verification
    uses that to pin the target while parameters are perturbed.
    """
    x, _ = model._stack_checked(x)
    labels = np.asarray(labels, dtype=np.int64)
    b = x.shape[0]
    if b == 0:
        raise ArgumentError("empty batch")
    if labels.shape != (b,):
        raise DimensionError(f"{labels.shape[0]} labels for batch of {b}")
    for i, lbl in enumerate(labels):
        if not 0 <= lbl < N_CLASSES:
            sid = sample_ids[i] if sample_ids is not None else f"batch row {i}"
            raise DataError(f"sample {sid} has no usable label (got {lbl})")

    p = model.params
    fusion, ys, caches = model.adapt_and_fuse(x)
    mask = _mask_matrix(b, model.d_a, model.mask_ratio, rng)
    masked = fusion * mask
    recon, r1, r2 = kernels.mlp2_forward(
        masked, p["recon/w1"], p["recon/b1"], p["recon/w2"], p["recon/b2"], False
    )
    target = fusion if mse_target is None else as_f64(mse_target)
    diff = recon - target
    l_mlm = float((diff * diff).mean())
    logits = recon @ p["classifier/w"] + p["classifier/b"]
    l_ce, dlogits = kernels.softmax_xent(logits, labels)

    # classifier head
    p.accumulate("classifier/w", recon.T @ dlogits)
    p.accumulate("classifier/b", dlogits.sum(axis=0))
    drecon = dlogits @ p["classifier/w"].T + 2.0 * diff / diff.size
    dmasked, dw1, db1, dw2, db2 = kernels.mlp2_backward(
        drecon, masked, r1, r2, p["recon/w1"], p["recon/w2"], False
    )
    p.accumulate("recon/w1", dw1)
    p.accumulate("recon/b1", db1)
    p.accumulate("recon/w2", dw2)
    p.accumulate("recon/b2", db2)

    dfusion = dmasked * mask
    if not model.stop_grad_target and mse_target is None:
        dfusion = dfusion - 2.0 * diff / diff.size
    p.accumulate("layer_weights", np.einsum("bd,bid->i", dfusion, ys))
    w = p["layer_weights"]
    for i in range(model.k):
        z1, z2 = caches[i]
        dy = np.ascontiguousarray(w[i] * dfusion)
        _, dwd, dbd, dwu, dbu = kernels.adapter_backward(
            dy,
            np.ascontiguousarray(x[:, i, :]),
            z1,
            z2,
            p[f"adapter{i}/w_down"],
            p[f"adapter{i}/w_up"],
        )
        p.accumulate(f"adapter{i}/w_down", dwd)
        p.accumulate(f"adapter{i}/b_down", dbd)
        p.accumulate(f"adapter{i}/w_up", dwu)
        p.accumulate(f"adapter{i}/b_up", dbu)

    return l_ce, l_mlm, l_ce + l_mlm


def _resolve_weight_position(layer_ids, requested) -> int:
    if requested is not None:
        return requested
    ids = tuple(layer_ids)
    return ids.index(18) if 18 in ids else len(ids) // 2


def train_adapter_stage(acoustic, labels, train_idx, val_idx, cfg: AdapterConfig, layer_ids):
    """Minibatch Adam on the joint objective; keeps the best-validation model.

    Returns (model, log) where log holds one record per epoch with the loss
    terms, validation weighted F1, and the current layer weights.
    """
    acoustic = as_f64(acoustic)
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

    n, k, d_a = acoustic.shape
    d_hidden = cfg.bottleneck if cfg.bottleneck is not None else min(128, max(1, d_a // 2))
    model = AdapterModel(k, d_a, d_hidden, layer_ids, cfg.mask_ratio, cfg.stop_grad_target)
    rng = np.random.default_rng(cfg.seed)
    model.init_weights(rng, _resolve_weight_position(layer_ids, cfg.init_weight_position))
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    best_f1 = -1.0
    best_params = None
    stale = 0
    log = []
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        sums = np.zeros(3)
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            model.params.zero_grad()
            l_ce, l_mlm, l = adapter_loss(model, acoustic[batch], labels[batch], rng)
            adam_step(model.params, opt)
            sums += np.array([l_ce, l_mlm, l]) * batch.size
        means = sums / order.size
        val_f1 = weighted_f1(model.predict(acoustic[val_idx]), labels[val_idx])
        log.append(
            {
                "epoch": epoch,
                "l_ce": means[0],
                "l_mlm": means[1],
                "l": means[2],
                "val_wf1": val_f1,
                "layer_weights": model.params["layer_weights"].copy(),
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
