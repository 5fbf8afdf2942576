"""Training loop, optimizers, learning-rate schedule and checkpoint files."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .data import AugmentationPolicy, Dataset, augment, batches
from .evaluate import evaluate_heads, per_head_nmi
from .mi import joint, mi_aug, push_terms
from .model import DhogModel, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DHOG"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    k: int = 4
    c: int = 2
    alpha: float = 0.05
    epochs: int = 200
    batch_size: int = 220
    repeats: int = 4
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    align: bool = True
    overcluster: int | None = None
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.repeats < 2:
            raise ValueError(f"repeats must be >= 2, got {self.repeats}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.k < 1 or self.c < 2:
            raise ValueError(f"need k >= 1 and c >= 2, got k={self.k}, c={self.c}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: "OrderedDict[str, ad.Tensor]", beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)

    def state(self) -> tuple:
        arrays = {f"m:{n}": a for n, a in self.m.items()}
        arrays.update({f"v:{n}": a for n, a in self.v.items()})
        return {"kind": "adam", "t": self.t}, arrays

    def load_state(self, meta: dict, arrays: dict) -> None:
        self.t = int(meta["t"])
        for n in self.m:
            self.m[n] = arrays[f"m:{n}"].copy()
            self.v[n] = arrays[f"v:{n}"].copy()


class SGD:
    """SGD with heavy-ball momentum."""

    def __init__(self, params, momentum=0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.velocity[n] = self.momentum * self.velocity[n] + g
            p.data = p.data - lr * self.velocity[n]

    def state(self) -> tuple:
        return {"kind": "sgd"}, {f"vel:{n}": a for n, a in self.velocity.items()}

    def load_state(self, meta: dict, arrays: dict) -> None:
        for n in self.velocity:
            self.velocity[n] = arrays[f"vel:{n}"].copy()


def make_optimizer(model: DhogModel, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGD(model.params, cfg.momentum)


def lr_at(step: int, total_steps: int, initial_lr: float) -> float:
    """Cosine annealing from ``initial_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return initial_lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return initial_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

@dataclass
class StepReport:
    loss: float
    mi_pull: float
    mi_push: float
    mi_aug: list
    push_contrib: list
    grads_pull: dict = field(default_factory=dict, repr=False)
    grads_push: dict = field(default_factory=dict, repr=False)


@dataclass
class ObjectiveTerms:
    pull: ad.Tensor
    push: ad.Tensor
    per_head_aug: list
    per_head_push: list
    pull_views: list  # heads (incl. overcluster) x views


def objective_terms(model: DhogModel, views: Sequence[np.ndarray], alpha: float, align: bool = True) -> ObjectiveTerms:
    """Build the pull and push terms for one multi-view batch.

    The push path reruns the heads on stop-gradient trunk features, and
    :func:`mi.mi_head_pair` stops gradients into earlier heads, so push
    gradients only reach the later head's own parameters.  With ``alpha == 0``
    the push term is still evaluated (for logging) but on constants.
    """
    pull_outs, push_outs = [], []
    for v in views:
        feats = model.trunk(v)
        pull_outs.append(model.heads(feats))
        if alpha > 0:
            push_outs.append(model.heads(feats, detach=True))
    k = model.k
    pull_views = [[o.probs[i] for o in pull_outs] for i in range(k)]
    pull_views += [[o.over[i] for o in pull_outs] for i in range(k) if pull_outs[0].over[i] is not None]
    per_head_aug = [mi_aug(hv) for hv in pull_views]
    pull = per_head_aug[0]
    for t in per_head_aug[1:]:
        pull = pull + t
    pull = pull * (1.0 / len(per_head_aug))
    if alpha > 0:
        push_views = [[o.probs[i] for o in push_outs] for i in range(k)]
    else:
        push_views = [[ad.stop_gradient(o.probs[i]) for o in pull_outs] for i in range(k)]
    per_head_push = push_terms(push_views, align)
    push = per_head_push[0]
    for t in per_head_push[1:]:
        push = push + t
    return ObjectiveTerms(pull, push, per_head_aug, per_head_push, pull_views)


def _diagnostic(terms: ObjectiveTerms) -> str:
    buf = io.StringIO()
    for i, hv in enumerate(terms.pull_views, start=1):
        p = joint(ad.stop_gradient(hv[0]), ad.stop_gradient(hv[1]), symmetrize=True).p.data
        buf.write(f"head {i} joint(view0, view1):\n{np.array2string(p, precision=4)}\n")
    return buf.getvalue()


def train_step(model: DhogModel, views: Sequence[np.ndarray], cfg: TrainConfig, optimizer=None,
               lr: float | None = None, keep_grads: bool = False) -> StepReport:
    """Forward all views, backpropagate pull and push separately, apply one update.

    Pass ``optimizer=None`` to only populate ``.grad`` (no parameter change).
    """
    if len(views) != cfg.repeats:
        raise ValueError(f"batch has {len(views)} views, config expects {cfg.repeats}")
    terms = objective_terms(model, views, cfg.alpha, cfg.align)
    pull_v, push_v = terms.pull.item(), terms.push.item()
    loss_v = -(pull_v - cfg.alpha * push_v)
    if not math.isfinite(loss_v):
        raise NumericError(f"non-finite loss {loss_v} (pull={pull_v}, push={push_v})\n{_diagnostic(terms)}")

    model.zero_grad()
    ad.backward(ad.neg(terms.pull))
    g_pull = {n: p.grad.copy() for n, p in model.params.items()}
    model.zero_grad()
    if cfg.alpha > 0:
        ad.backward(terms.push * cfg.alpha)
    g_push = {n: p.grad.copy() for n, p in model.params.items()}
    for n, p in model.params.items():
        p.grad = g_pull[n] + g_push[n]
    if optimizer is not None:
        optimizer.step(cfg.lr if lr is None else lr)
    return StepReport(
        loss_v, pull_v, push_v,
        [t.item() for t in terms.per_head_aug],
        [t.item() for t in terms.per_head_push],
        g_pull if keep_grads else {}, g_push if keep_grads else {},
    )


# ---------------------------------------------------------------------------
# evaluation rows and fit
# ---------------------------------------------------------------------------

HISTORY_FIELDS = ["epoch", "head", "mi_aug", "mi_push_contrib", "acc", "nmi", "ari", "selected"]


def epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    # stream ids keep evaluation draws disjoint from batch streams (which use 3-word keys)
    return np.random.default_rng([seed, epoch, stream, 0])


def evaluate_epoch(model: DhogModel, ds: Dataset, cfg: TrainConfig, policy: AugmentationPolicy,
                   epoch: int, batch_size: int = 1000) -> tuple:
    """Per-head rows for the metric history, plus the selected head (1-based).

    mi_aug and push contributions are soft estimates over the whole dataset
    with fresh augmentations; selection uses NMI between two augmented draws.
    """
    rng = epoch_rng(cfg.seed, epoch, 1)
    views = [model.predict_proba(v, batch_size)[0] for v in augment(ds.x, policy, rng)]
    with ad.no_grad():
        head_views = [[ad.tensor(v[i]) for v in views] for i in range(model.k)]
        aug = [mi_aug(hv).item() for hv in head_views]
        push = [t.item() for t in push_terms(head_views, cfg.align)]
    nmis = per_head_nmi(model, ds.x, policy, epoch_rng(cfg.seed, epoch, 2), batch_size)
    selected = int(np.argmax(nmis)) + 1
    sup = evaluate_heads(model, ds.x, ds.labels, policy) if ds.labels is not None else None
    rows = []
    for i in range(model.k):
        m = sup[i] if sup else None
        rows.append({
            "epoch": epoch, "head": i + 1, "mi_aug": aug[i], "mi_push_contrib": push[i],
            "acc": m.accuracy if m else float("nan"), "nmi": m.nmi if m else float("nan"),
            "ari": m.ari if m else float("nan"), "selected": int(i + 1 == selected),
        })
    return rows, selected


@dataclass
class FitResult:
    history: list
    selected_head: int
    steps: int
    last_report: StepReport | None = None


def fit(model: DhogModel, ds: Dataset, cfg: TrainConfig, policy: AugmentationPolicy,
        callbacks: Sequence[Callable] = (), checkpoint_path=None, config_snapshot: dict | None = None,
        optimizer=None) -> FitResult:
    """Train for ``cfg.epochs`` epochs; evaluation rows at epoch 0, every ``eval_every`` and at the end.

    Each callback is called as ``cb(epoch, model, rows)`` after every evaluation.
    """
    optimizer = optimizer or make_optimizer(model, cfg)
    steps_per_epoch = len(ds) // cfg.batch_size
    total = steps_per_epoch * cfg.epochs
    history: list = []

    def do_eval(epoch):
        rows, sel = evaluate_epoch(model, ds, cfg, policy, epoch)
        history.extend(rows)
        for cb in callbacks:
            cb(epoch, model, rows)
        return sel

    selected = do_eval(0)
    step = 0
    report = None
    for epoch in range(1, cfg.epochs + 1):
        for batch in batches(ds, cfg.batch_size, policy, cfg.seed, epoch):
            report = train_step(model, batch.views, cfg, optimizer, lr_at(step, total, cfg.lr))
            step += 1
        if epoch % max(cfg.eval_every, 1) == 0 or epoch == cfg.epochs:
            selected = do_eval(epoch)
            log.info("epoch %d loss %.5f pull %.5f push %.5f", epoch, report.loss, report.mi_pull, report.mi_push)
        if checkpoint_path and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, config_snapshot or {}, optimizer, epoch)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, config_snapshot or {}, optimizer, cfg.epochs)
    return FitResult(history, selected, step, report)


def write_history(rows: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        f.write(",".join(HISTORY_FIELDS) + "\n")
        for r in rows:
            f.write(",".join(_fmt(r[k]) for k in HISTORY_FIELDS) + "\n")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int
    header: dict
    params: "OrderedDict[str, np.ndarray]"
    optimizer: dict
    optimizer_arrays: dict
    epoch: int


def save_checkpoint(path, model: DhogModel, config: dict, optimizer=None, epoch: int = 0) -> None:
    """Write ``DHOG`` magic, u32 version, length-prefixed JSON header, then named f64 blocks."""
    opt_meta, opt_arrays = optimizer.state() if optimizer is not None else ({}, {})
    header = {"config": config, "model": model.cfg.to_dict(), "model_seed": model.seed,
              "epoch": epoch, "optimizer": opt_meta}
    blocks = [(f"param:{n}", p.data) for n, p in model.params.items()]
    blocks += [(f"opt:{n}", a) for n, a in opt_arrays.items()]
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    text = json.dumps(header, sort_keys=True).encode()
    out.write(struct.pack("<Q", len(text)))
    out.write(text)
    out.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        raw = name.encode()
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(out.getvalue())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a DHOG checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable header: {e}") from e
    (count,) = r.unpack("<I")
    params: OrderedDict = OrderedDict()
    opt_arrays = {}
    try:
        for _ in range(count):
            (nlen,) = r.unpack("<I")
            name = r.take(nlen).decode()
            (ndim,) = r.unpack("<I")
            shape = r.unpack(f"<{ndim}Q")
            size = int(np.prod(shape, dtype=np.uint64)) if ndim else 1
            arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
            kind, _, key = name.partition(":")
            (params if kind == "param" else opt_arrays)[key] = arr
    except (UnicodeDecodeError, ValueError, OverflowError) as e:
        raise CorruptCheckpointError(f"{path}: malformed parameter block: {e}") from e
    if r.pos != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(version, header, params, header.get("optimizer", {}), opt_arrays, int(header.get("epoch", 0)))


def restore(model: DhogModel, ckpt: Checkpoint, optimizer=None) -> None:
    """Copy checkpoint parameters into ``model``; names and shapes must match exactly."""
    missing = [n for n in model.params if n not in ckpt.params]
    extra = [n for n in ckpt.params if n not in model.params]
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for n, p in model.params.items():
        if ckpt.params[n].shape != p.shape:
            raise CheckpointError(f"shape mismatch for parameter {n}: checkpoint {ckpt.params[n].shape}, "
                                  f"model {p.shape}")
    for n, p in model.params.items():
        p.data = ckpt.params[n].copy()
    if optimizer is not None and ckpt.optimizer:
        optimizer.load_state(ckpt.optimizer, ckpt.optimizer_arrays)


def model_from_checkpoint(ckpt: Checkpoint) -> DhogModel:
    model = DhogModel(ModelConfig(**ckpt.header["model"]), seed=ckpt.header.get("model_seed", 0))
    restore(model, ckpt)
    return model
