"""Stage 2: map visual features into the acoustic embedding space.

A two-layer ReLU MLP projects each visual vector to the width of the adapted
acoustic embedding; training pulls matched pairs together with a symmetric
temperature-scaled contrastive loss over in-batch cosine similarities. The
acoustic side is produced by a frozen stage-1 model and never trains here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .adapter import AdapterModel, extract_acoustic
from .data import load_checkpoint, save_checkpoint
from .errors import ArgumentError, CheckpointError, ConfigError, DimensionError, NumericError
from .numcore import AdamState, ParamSet, adam_step, as_f64

TAU_MIN = 0.01
TAU_MAX = 1.0


@dataclass
class AlignConfig:
    epochs: int = 60
    batch_size: int = 1024
    lr: float = 3e-3
    weight_decay: float = 0.02
    tau_init: float = 0.07
    seed: int = 0


class VisionMLP:
    KIND = "vision"

    def __init__(self, d_v, d_a):
        if d_v < 1 or d_a < 1:
            raise ConfigError(f"bad projection dims d_v={d_v}, d_a={d_a}")
        self.d_v = d_v
        self.d_a = d_a
        self.params = ParamSet()
        self.params.add("w1", np.zeros((d_v, d_a)))
        self.params.add("b1", np.zeros(d_a))
        self.params.add("w2", np.zeros((d_a, d_a)))
        self.params.add("b2", np.zeros(d_a))
        self.params.add("log_tau", np.array([math.log(0.07)]))

    @property
    def tau(self) -> float:
        return float(np.exp(self.params["log_tau"][0]))

    def init_weights(self, rng, tau_init=0.07):
        if not TAU_MIN <= tau_init <= TAU_MAX:
            raise ConfigError(f"tau_init {tau_init} outside [{TAU_MIN}, {TAU_MAX}]")
        self.params["w1"][...] = rng.uniform(-1, 1, (self.d_v, self.d_a)) / np.sqrt(self.d_v)
        self.params["b1"][...] = 0.0
        self.params["w2"][...] = rng.uniform(-1, 1, (self.d_a, self.d_a)) / np.sqrt(self.d_a)
        self.params["b2"][...] = 0.0
        self.params["log_tau"][...] = math.log(tau_init)
        return self

    def clamp_tau(self):
        lt = self.params["log_tau"]
        lt[...] = np.clip(lt, math.log(TAU_MIN), math.log(TAU_MAX))

    def forward(self, x):
        """ReLU(ReLU(x W1 + b1) W2 + b2); accepts one vector or a batch."""
        x = as_f64(x)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.d_v:
            raise DimensionError(f"visual input has dimension {x.shape[1]}, expected {self.d_v}")
        y, _, _ = kernels.mlp2_forward(
            x, self.params["w1"], self.params["b1"], self.params["w2"], self.params["b2"], True
        )
        return y[0] if single else y

    def copy(self) -> "VisionMLP":
        dup = VisionMLP(self.d_v, self.d_a)
        dup.params.load_values({n: self.params[n] for n in self.params.names()})
        return dup

    def save(self, path):
        save_checkpoint(
            path,
            self.KIND,
            {"d_v": self.d_v, "d_a": self.d_a},
            {n: self.params[n] for n in self.params.names()},
        )

    @classmethod
    def load(cls, path) -> "VisionMLP":
        ck = load_checkpoint(path, expect_kind=cls.KIND)
        model = cls(ck.dims["d_v"], ck.dims["d_a"])
        try:
            model.params.load_values(ck.tensors)
        except (ArgumentError, DimensionError) as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        return model


def vision_forward(model: VisionMLP, x):
    return model.forward(x)


def _normalize_rows(f, side: str, sample_ids=None):
    norms = np.linalg.norm(f, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        i = int(bad[0])
        sid = sample_ids[i] if sample_ids is not None else f"row {i}"
        raise NumericError(f"zero-norm {side} embedding for sample {sid}")
    return f / norms[:, None], norms


def cosine_similarity_matrix(f_v, f_a, sample_ids=None) -> np.ndarray:
    """S[i, j] = cosine(f_v[i], f_a[j]) for row-paired embedding matrices."""
    f_v = as_f64(f_v)
    f_a = as_f64(f_a)
    if f_v.ndim != 2 or f_a.ndim != 2 or f_v.shape[1] != f_a.shape[1]:
        raise DimensionError(f"embedding shapes {f_v.shape} and {f_a.shape} are not comparable")
    u, _ = _normalize_rows(f_v, "visual", sample_ids)
    w, _ = _normalize_rows(f_a, "acoustic", sample_ids)
    return u @ w.T


def contrastive_loss(s, tau: float):
    """Symmetric InfoNCE over a pairwise similarity matrix.

    Both directions (rows: visual anchors, columns: acoustic anchors) use the
    diagonal as the one-hot target. Returns (loss, dL/dS, dL/dtau).
    """
    s = as_f64(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {s.shape}")
    j = s.shape[0]
    if j < 2:
        raise ArgumentError(f"contrastive batch needs at least 2 pairs, got {j}")
    if tau <= 0:
        raise ArgumentError(f"temperature must be positive, got {tau}")

    a = s / tau
    p1 = kernels.softmax_rows(a)
    p2 = kernels.softmax_rows(np.ascontiguousarray(a.T))

    def _diag_ce(m):
        mx = m.max(axis=1)
        lse = mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))
        return float((lse - np.diag(m)).sum())

    loss = (_diag_ce(a) + _diag_ce(a.T)) / (2 * j)
    eye = np.eye(j)
    da = ((p1 - eye) + (p2 - eye).T) / (2 * j)
    ds = da / tau
    dtau = -float((da * s).sum()) / tau**2
    return loss, ds, dtau


def retrieval_recall_at_1(f_v, f_a) -> float:
    """Fraction of visual rows whose nearest acoustic row is their own pair."""
    f_v = as_f64(f_v)
    if f_v.shape[0] == 0:
        raise ArgumentError("empty retrieval batch")
    s = cosine_similarity_matrix(f_v, f_a)
    hits = np.argmax(s, axis=1) == np.arange(s.shape[0])
    return float(hits.mean())


def alignment_loss(model: VisionMLP, visual, f_a, sample_ids=None):
    """L_ita on one batch; accumulates gradients into model.params.

    f_a is the frozen acoustic embedding matrix; only the vision MLP and the
    temperature receive gradients.
    """
    visual = as_f64(visual)
    f_a = as_f64(f_a)
    if visual.shape[0] != f_a.shape[0]:
        raise DimensionError(f"{visual.shape[0]} visual rows vs {f_a.shape[0]} acoustic rows")
    p = model.params
    emb, z1, z2 = kernels.mlp2_forward(visual, p["w1"], p["b1"], p["w2"], p["b2"], True)
    u, nu = _normalize_rows(emb, "visual", sample_ids)
    w, _ = _normalize_rows(f_a, "acoustic", sample_ids)
    s = u @ w.T
    tau = model.tau
    loss, ds, dtau = contrastive_loss(s, tau)

    # back through the cosine on the visual side only
    du = ds @ w
    demb = (du - (du * u).sum(axis=1, keepdims=True) * u) / nu[:, None]
    _, dw1, db1, dw2, db2 = kernels.mlp2_backward(demb, visual, z1, z2, p["w1"], p["w2"], True)
    p.accumulate("w1", dw1)
    p.accumulate("b1", db1)
    p.accumulate("w2", dw2)
    p.accumulate("b2", db2)
    p.accumulate("log_tau", np.array([dtau * tau]))
    return loss


def alignment_stats(model: VisionMLP, visual, f_a, batch_size=None) -> dict:
    """Evaluation-only alignment quality probes.

    cosine_gap is mean matched-pair cosine minus mean mismatched cosine over
    the whole set; recall@1 is computed in batches of batch_size (whole set
    when None), mirroring in-batch retrieval during training.
    """
    visual = as_f64(visual)
    f_a = as_f64(f_a)
    n = visual.shape[0]
    if n < 2:
        raise ArgumentError("need at least 2 pairs for alignment statistics")
    emb = model.forward(visual)
    s = cosine_similarity_matrix(emb, f_a)
    diag = float(np.trace(s)) / n
    off = float(s.sum() - np.trace(s)) / (n * n - n)

    step = n if batch_size is None else min(batch_size, n)
    hits = 0
    total = 0
    for start in range(0, n, step):
        chunk = slice(start, min(start + step, n))
        size = chunk.stop - chunk.start
        if size < 2:
            continue
        sub = s[chunk, chunk]
        hits += int((np.argmax(sub, axis=1) == np.arange(size)).sum())
        total += size
    return {
        "cosine_gap": diag - off,
        "matched_cosine": diag,
        "mismatched_cosine": off,
        "recall_at_1": hits / total if total else 1.0,
    }


def train_alignment_stage(visual, acoustic_stack, adapter: AdapterModel, cfg: AlignConfig):
    """Adam on L_ita over shuffled minibatches; the adapter stays frozen.

    Returns (model, log); each log record carries the epoch mean L_ita, the
    current temperature, and deterministic in-batch recall@1.
    """
    visual = as_f64(visual)
    n = visual.shape[0]
    if n < 2:
        raise ConfigError("alignment needs at least 2 paired samples")
    if cfg.batch_size < 2:
        raise ConfigError(f"batch size must be at least 2, got {cfg.batch_size}")
    if cfg.batch_size > n:
        raise ConfigError(
            f"batch size {cfg.batch_size} exceeds the {n} available pairs; "
            f"reduce --align-batch to at most {n}"
        )
    if cfg.epochs < 1:
        raise ConfigError(f"epochs must be positive, got {cfg.epochs}")

    f_a = extract_acoustic(adapter, acoustic_stack)  # frozen: computed once, never updated
    if f_a.shape[0] != n:
        raise DimensionError(f"{n} visual rows vs {f_a.shape[0]} acoustic rows")
    model = VisionMLP(visual.shape[1], f_a.shape[1])
    rng = np.random.default_rng(cfg.seed)
    model.init_weights(rng, cfg.tau_init)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            if batch.size < 2:  # a trailing singleton has no negatives
                continue
            model.params.zero_grad()
            loss = alignment_loss(model, visual[batch], f_a[batch])
            adam_step(model.params, opt)
            model.clamp_tau()
            loss_sum += loss * batch.size
            seen += batch.size
        stats = alignment_stats(model, visual, f_a, cfg.batch_size)
        log.append(
            {
                "epoch": epoch,
                "l_ita": loss_sum / max(seen, 1),
                "tau": model.tau,
                "recall_at_1": stats["recall_at_1"],
            }
        )
    return model, log
