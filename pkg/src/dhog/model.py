"""DHOG network: a shared trunk with heads branching off at increasing depth.

Two trunk kinds are provided.  ``mlp`` is a stack of dense+ReLU layers for
low-dimensional toy data.  ``smallcnn`` is a stack of stride-2 3x3
convolutions for images.  Each head owns a small block (dense or conv layers)
followed by a one-hidden-layer MLP and a softmax over ``c`` labels.  An
optional overclustering twin shares the head's block and has its own MLP.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class TrunkConfig:
    kind: str = "mlp"
    in_shape: tuple = (2,)
    widths: tuple = (64, 64)
    branch_points: tuple = (2, 2, 2, 2)

    def __post_init__(self):
        self.in_shape = tuple(self.in_shape)
        self.widths = tuple(self.widths)
        self.branch_points = tuple(self.branch_points)
        if self.kind not in ("mlp", "smallcnn"):
            raise ValueError(f"unknown trunk kind {self.kind!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid trunk widths {self.widths}")
        if any(b < 1 or b > len(self.widths) for b in self.branch_points):
            raise ValueError(f"branch points {self.branch_points} outside 1..{len(self.widths)}")
        if any(b2 < b1 for b1, b2 in zip(self.branch_points, self.branch_points[1:])):
            raise ValueError(f"branch points must be nondecreasing, got {self.branch_points}")


@dataclass
class HeadConfig:
    c: int
    block_widths: tuple = ()
    mlp_hidden: int = 200
    overcluster_c: int | None = None

    def __post_init__(self):
        self.block_widths = tuple(self.block_widths)
        if self.c < 2:
            raise ValueError(f"a head needs at least 2 labels, got c={self.c}")
        if self.mlp_hidden < 1 or any(w < 1 for w in self.block_widths):
            raise ValueError("head widths must be positive")
        if self.overcluster_c is not None and self.overcluster_c < 2:
            raise ValueError(f"overcluster_c must be >= 2, got {self.overcluster_c}")


@dataclass
class ModelConfig:
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    heads: list = field(default_factory=lambda: [HeadConfig(2) for _ in range(4)])

    def __post_init__(self):
        if isinstance(self.trunk, dict):
            self.trunk = TrunkConfig(**self.trunk)
        self.heads = [HeadConfig(**h) if isinstance(h, dict) else h for h in self.heads]
        if len(self.heads) != len(self.trunk.branch_points):
            raise ValueError(f"{len(self.heads)} heads but {len(self.trunk.branch_points)} branch points")

    def to_dict(self) -> dict:
        return asdict(self)


def toy_config(k: int = 4, c: int = 2, overcluster_c: int | None = None) -> ModelConfig:
    return ModelConfig(
        TrunkConfig("mlp", (2,), (64, 64), (2,) * k),
        [HeadConfig(c, (), 200, overcluster_c) for _ in range(k)],
    )


def default_branch_points(k: int, depth: int = 3) -> tuple:
    """First heads read successive trunk stages; the rest read the deepest one."""
    return tuple(min(i + 1, depth) for i in range(k))


def image_config(k: int = 8, c: int = 10, channels: Sequence[int] = (32, 64, 128), head_block: int = 128,
                 mlp_hidden: int = 200, overcluster_c: int | None = None, in_shape=(3, 20, 20)) -> ModelConfig:
    return ModelConfig(
        TrunkConfig("smallcnn", tuple(in_shape), tuple(channels), default_branch_points(k, len(channels))),
        [HeadConfig(c, (head_block,), mlp_hidden, overcluster_c) for _ in range(k)],
    )


@dataclass
class HeadOutputs:
    probs: list  # one (n, c) Tensor per head
    over: list  # one (n, overcluster_c) Tensor or None per head

    def pull_views(self):
        return [p for p in self.probs] + [o for o in self.over if o is not None]


class DhogModel:
    """Parameters live in ``self.params`` keyed by dotted names, in creation order."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(seed)
        t = cfg.trunk
        cnn = t.kind == "smallcnn"
        if cnn and len(t.in_shape) != 3:
            raise ValueError(f"smallcnn expects (ch, h, w) input, got {t.in_shape}")
        if not cnn and len(t.in_shape) != 1:
            raise ValueError(f"mlp expects flat input, got {t.in_shape}")

        width_in = t.in_shape[0]
        for d, w in enumerate(t.widths, start=1):
            self._layer(rng, f"trunk.{d}", width_in, w, cnn)
            width_in = w
        for i, h in enumerate(cfg.heads, start=1):
            width_in = t.widths[t.branch_points[i - 1] - 1]
            for b, w in enumerate(h.block_widths, start=1):
                self._layer(rng, f"head{i}.block{b}", width_in, w, cnn)
                width_in = w
            self._layer(rng, f"head{i}.hidden", width_in, h.mlp_hidden)
            self._layer(rng, f"head{i}.out", h.mlp_hidden, h.c)
            if h.overcluster_c:
                self._layer(rng, f"head{i}.over_hidden", width_in, h.mlp_hidden)
                self._layer(rng, f"head{i}.over_out", h.mlp_hidden, h.overcluster_c)

    def _layer(self, rng, name, fan_in_width, width, conv=False):
        if conv:
            fan_in = fan_in_width * 9
            shape = (width, fan_in_width, 3, 3)
        else:
            fan_in = fan_in_width
            shape = (fan_in_width, width)
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name + ".W"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.params[name + ".b"] = Tensor(rng.uniform(-bound, bound, size=width), requires_grad=True)

    @property
    def k(self) -> int:
        return len(self.cfg.heads)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def head_params(self, i: int) -> dict:
        """Parameters belonging to head ``i`` (1-based)."""
        prefix = f"head{i}."
        return {n: p for n, p in self.params.items() if n.startswith(prefix)}

    def trunk_params(self) -> dict:
        return {n: p for n, p in self.params.items() if n.startswith("trunk.")}

    def zero_grad(self) -> None:
        ad.zero_grads(self.params.values())

    def _dense(self, name, x, act=True):
        y = ad.add_bias(ad.matmul(x, self.params[name + ".W"]), self.params[name + ".b"])
        return ad.relu(y) if act else y

    def _conv(self, name, x, stride):
        y = ad.conv2d(x, self.params[name + ".W"], stride=stride, pad=1)
        return ad.relu(ad.add_bias(y, self.params[name + ".b"]))

    def trunk(self, x) -> list:
        """Activations after each trunk stage (index d-1 for branch point d)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = self.cfg.trunk.in_shape
        if x.shape[1:] != expected:
            raise ad.ShapeError(f"input shape {x.shape[1:]} does not match model input {expected}")
        cnn = self.cfg.trunk.kind == "smallcnn"
        feats = []
        for d in range(1, len(self.cfg.trunk.widths) + 1):
            x = self._conv(f"trunk.{d}", x, 2) if cnn else self._dense(f"trunk.{d}", x)
            feats.append(x)
        return feats

    def head(self, i: int, feat: Tensor) -> tuple:
        """Probabilities (and overcluster probabilities or None) for head ``i`` (1-based)."""
        h = self.cfg.heads[i - 1]
        cnn = self.cfg.trunk.kind == "smallcnn"
        x = feat
        for b in range(1, len(h.block_widths) + 1):
            x = self._conv(f"head{i}.block{b}", x, 1) if cnn else self._dense(f"head{i}.block{b}", x)
        if cnn:
            n, ch = x.shape[:2]
            x = ad.mean(ad.reshape(x, (n, ch, -1)), axis=2)
        probs = ad.softmax(self._dense(f"head{i}.out", self._dense(f"head{i}.hidden", x), act=False))
        over = None
        if h.overcluster_c:
            over = ad.softmax(self._dense(f"head{i}.over_out", self._dense(f"head{i}.over_hidden", x), act=False))
        return probs, over

    def heads(self, feats: Sequence[Tensor], detach: bool = False) -> HeadOutputs:
        """All heads on precomputed trunk features.

        With ``detach`` the features are wrapped in stop_gradient, so nothing
        computed from the outputs reaches trunk parameters.
        """
        if detach:
            feats = [ad.stop_gradient(f) for f in feats]
        probs, over = [], []
        for i, bp in enumerate(self.cfg.trunk.branch_points, start=1):
            p, o = self.head(i, feats[bp - 1])
            probs.append(p)
            over.append(o)
        return HeadOutputs(probs, over)

    def forward(self, x, mode: str = "train") -> HeadOutputs:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        # No mode-dependent layers (no dropout or batch norm); eval only skips the graph.
        if mode == "eval":
            with ad.no_grad():
                return self.heads(self.trunk(x))
        return self.heads(self.trunk(x))

    __call__ = forward

    def predict_proba(self, x: np.ndarray, batch_size: int = 1000) -> tuple:
        """Evaluation-mode probabilities as plain arrays, computed in chunks.

        Returns (list of (n, c) arrays per head, list of overcluster arrays or None).
        """
        probs = [[] for _ in range(self.k)]
        over = [[] for _ in range(self.k)]
        for s in range(0, len(x), batch_size):
            out = self.forward(x[s:s + batch_size], mode="eval")
            for i in range(self.k):
                probs[i].append(out.probs[i].data)
                if out.over[i] is not None:
                    over[i].append(out.over[i].data)
        return ([np.concatenate(p) if p else np.zeros((0, h.c)) for p, h in zip(probs, self.cfg.heads)],
                [np.concatenate(o) if o else None for o in over])

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.params.items())


def hard_labels(probs) -> np.ndarray:
    """Argmax per row; ties go to the smallest label."""
    return np.argmax(np.asarray(getattr(probs, "data", probs)), axis=1)

