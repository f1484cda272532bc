"""Desk-scale classifier zoo.

Four architectures with stable, hookable layer names::

    mlp        fc1, fc2, fc3
    cnn_a      conv1, pool1, conv2, pool2, flatten, fc
    cnn_b      conv1, conv2, pool1, conv3, pool2, flatten, fc1, fc2
    tiny_attn  patch_embed, attn_block, head

A layer's output is the value a hook sees. Convolution and linear layers emit
their pre-activation output; the ReLU belongs to the start of the next layer.
Inputs in [0, 1] are centred by a fixed shift of -0.5 before the first layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import (
    DivergedTraining,
    EmptySplit,
    MissingRng,
    NonFiniteResult,
    ShapeMismatch,
    UnknownArchitecture,
    UnknownLayer,
)
from .feature_aug import apply_hook
from .rng import Stream

ARCHITECTURES = ("mlp", "cnn_a", "cnn_b", "tiny_attn")

LAYER_REGISTRY = {
    "mlp": ("fc1", "fc2", "fc3"),
    "cnn_a": ("conv1", "pool1", "conv2", "pool2", "flatten", "fc"),
    "cnn_b": ("conv1", "conv2", "pool1", "conv3", "pool2", "flatten", "fc1", "fc2"),
    "tiny_attn": ("patch_embed", "attn_block", "head"),
}

PATCH = 4
EMBED = 32
INPUT_CENTER = 0.5


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    num_classes: int = 10
    input_shape: tuple = (1, 16, 16)
    init_seed: int = 1

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            architecture=d["architecture"],
            num_classes=int(d.get("num_classes", 10)),
            input_shape=tuple(d.get("input_shape", (1, 16, 16))),
            init_seed=int(d.get("init_seed", 1)),
        )


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) in declaration order."""
    c, h, w = cfg.input_shape
    k = cfg.num_classes
    arch = cfg.architecture
    if arch == "mlp":
        d = c * h * w
        return [
            ("fc1.w", (d, 256), d), ("fc1.b", (256,), d),
            ("fc2.w", (256, 128), 256), ("fc2.b", (128,), 256),
            ("fc3.w", (128, k), 128), ("fc3.b", (k,), 128),
        ]
    if arch == "cnn_a":
        flat = 32 * (h // 4) * (w // 4)
        return [
            ("conv1.w", (16, c, 3, 3), c * 9), ("conv1.b", (16,), c * 9),
            ("conv2.w", (32, 16, 3, 3), 16 * 9), ("conv2.b", (32,), 16 * 9),
            ("fc.w", (flat, k), flat), ("fc.b", (k,), flat),
        ]
    if arch == "cnn_b":
        flat = 32 * (h // 4) * (w // 4)
        return [
            ("conv1.w", (8, c, 5, 5), c * 25), ("conv1.b", (8,), c * 25),
            ("conv2.w", (16, 8, 3, 3), 8 * 9), ("conv2.b", (16,), 8 * 9),
            ("conv3.w", (32, 16, 3, 3), 16 * 9), ("conv3.b", (32,), 16 * 9),
            ("fc1.w", (flat, 64), flat), ("fc1.b", (64,), flat),
            ("fc2.w", (64, k), 64), ("fc2.b", (k,), 64),
        ]
    if arch == "tiny_attn":
        pd = c * PATCH * PATCH
        return [
            ("patch_embed.w", (pd, EMBED), pd), ("patch_embed.b", (EMBED,), pd),
            ("patch_embed.pos", ((h // PATCH) * (w // PATCH), EMBED), EMBED),
            ("attn.q", (EMBED, EMBED), EMBED),
            ("attn.k", (EMBED, EMBED), EMBED),
            ("attn.v", (EMBED, EMBED), EMBED),
            ("head.w", (EMBED, k), EMBED), ("head.b", (k,), EMBED),
        ]
    raise UnknownArchitecture(arch)


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    root = Stream(cfg.init_seed).child("init", cfg.architecture)
    params = {}
    for name, shape, fan_in in _param_shapes(cfg):
        # He-uniform for weight matrices/kernels, 1/sqrt(fan_in) for vectors
        bound = np.sqrt(6.0 / fan_in) if len(shape) > 1 else 1.0 / np.sqrt(fan_in)
        params[name] = root.child(name).uniform(-bound, bound, shape).astype(np.float32)
    return params


# -- layer functions: (params, x) -> x ------------------------------------


def _linear(p, prefix, x):
    return T.add(T.matmul(x, p[prefix + ".w"]), p[prefix + ".b"])


def _mlp_layers():
    return [
        ("fc1", lambda p, x: _linear(p, "fc1", T.flatten(x))),
        ("fc2", lambda p, x: _linear(p, "fc2", T.relu(x))),
        ("fc3", lambda p, x: _linear(p, "fc3", T.relu(x))),
    ]


def _cnn_a_layers():
    return [
        ("conv1", lambda p, x: T.conv2d(x, p["conv1.w"], p["conv1.b"], pad=1)),
        ("pool1", lambda p, x: T.maxpool2d(T.relu(x), 2)),
        ("conv2", lambda p, x: T.conv2d(x, p["conv2.w"], p["conv2.b"], pad=1)),
        ("pool2", lambda p, x: T.maxpool2d(T.relu(x), 2)),
        ("flatten", lambda p, x: T.flatten(x)),
        ("fc", lambda p, x: _linear(p, "fc", x)),
    ]


def _cnn_b_layers():
    return [
        ("conv1", lambda p, x: T.conv2d(x, p["conv1.w"], p["conv1.b"], pad=2)),
        ("conv2", lambda p, x: T.conv2d(T.relu(x), p["conv2.w"], p["conv2.b"], pad=1)),
        ("pool1", lambda p, x: T.maxpool2d(T.relu(x), 2)),
        ("conv3", lambda p, x: T.conv2d(x, p["conv3.w"], p["conv3.b"], pad=1)),
        ("pool2", lambda p, x: T.maxpool2d(T.relu(x), 2)),
        ("flatten", lambda p, x: T.flatten(x)),
        ("fc1", lambda p, x: _linear(p, "fc1", x)),
        ("fc2", lambda p, x: _linear(p, "fc2", T.relu(x))),
    ]


def _patch_embed(p, x):
    n, c, h, w = x.shape
    gh, gw = h // PATCH, w // PATCH
    x = T.reshape(x, (n, c, gh, PATCH, gw, PATCH))
    x = T.permute(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (n * gh * gw, c * PATCH * PATCH))
    tok = T.reshape(_linear(p, "patch_embed", x), (n, gh * gw, EMBED))
    return T.add(tok, p["patch_embed.pos"])


def _attn_block(p, x):
    n, t, d = x.shape
    flat = T.reshape(x, (n * t, d))
    q = T.reshape(T.matmul(flat, p["attn.q"]), (n, t, d))
    k = T.reshape(T.matmul(flat, p["attn.k"]), (n, t, d))
    v = T.reshape(T.matmul(flat, p["attn.v"]), (n, t, d))
    scores = T.scale(T.bmm(q, T.permute(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    return T.add(x, T.bmm(T.softmax(scores), v))


def _tiny_attn_layers():
    return [
        ("patch_embed", _patch_embed),
        ("attn_block", _attn_block),
        ("head", lambda p, x: _linear(p, "head", T.mean(x, axis=1))),
    ]


_LAYERS: dict[str, Callable] = {
    "mlp": _mlp_layers,
    "cnn_a": _cnn_a_layers,
    "cnn_b": _cnn_b_layers,
    "tiny_attn": _tiny_attn_layers,
}


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self._layers = _LAYERS[self.config.architecture]()
        self._const = None
        self._center = None

    def __getstate__(self):
        return {"config": self.config, "params": self.params, "metadata": self.metadata}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self.__post_init__()

    @property
    def layer_names(self) -> list[str]:
        return [name for name, _ in self._layers]

    @property
    def architecture(self) -> str:
        return self.config.architecture

    def constant_params(self) -> dict[str, T.Tensor]:
        if self._const is None:
            self._const = {k: T.constant(v) for k, v in self.params.items()}
        return self._const

    def center(self) -> T.Tensor:
        if self._center is None:
            self._center = T.constant(np.full(self.config.input_shape, -INPUT_CENTER, dtype=np.float32))
        return self._center

    def forward(self, x, hooks=None, rng=None, params=None) -> T.Tensor:
        return forward(self, x, hooks=hooks, rng=rng, params=params)

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return logits_of(self, images, batch_size=batch_size).argmax(axis=1)


def build_model(config: ModelConfig) -> Model:
    if config.architecture not in ARCHITECTURES:
        raise UnknownArchitecture(config.architecture)
    return Model(config, init_params(config))


def forward(model: Model, x, hooks=None, rng=None, params=None) -> T.Tensor:
    """Logits ``[batch, num_classes]``, with optional activation hooks."""
    if not isinstance(x, T.Tensor):
        x = T.constant(np.asarray(x, dtype=np.float32))
    if tuple(x.shape[1:]) != tuple(model.config.input_shape):
        raise ShapeMismatch(f"expected [N, {', '.join(map(str, model.config.input_shape))}], got {list(x.shape)}")
    hooks = list(hooks or [])
    names = model.layer_names
    for h in hooks:
        if h.layer not in names:
            raise UnknownLayer(f"{model.architecture} has no layer {h.layer!r}")
    if hooks and rng is None:
        raise MissingRng("hooked forward needs an rng stream")
    p = params if params is not None else model.constant_params()
    x = T.add(x, model.center())
    for name, fn in model._layers:
        x = fn(p, x)
        for h in hooks:
            if h.layer == name:
                x = apply_hook(x, h, rng)
    return x


def logits_of(model: Model, images: np.ndarray, hooks=None, rng=None, batch_size: int = 500) -> np.ndarray:
    """Untracked batched logits as a float32 array."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(model, T.constant(images[i : i + batch_size]), hooks, rng).data)
    return np.concatenate(out, axis=0)


def accuracy(model: Model, dataset, hooks=None, rng=None, batch_size: int = 500) -> float:
    """Fraction of samples whose argmax logit (lowest id on ties) is the label."""
    if len(dataset.labels) == 0:
        raise EmptySplit(f"split {dataset.split!r} is empty")
    pred = logits_of(model, dataset.images, hooks, rng, batch_size).argmax(axis=1)
    return float(np.mean(pred == dataset.labels))


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 1

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainHyper":
        return cls(**(d or {}))


def train(model: Model, dataset, hyper: TrainHyper | dict | None = None, test=None, log=None):
    """SGD with momentum on cross-entropy. Returns ``(trained_model, metrics)``."""
    if not isinstance(hyper, TrainHyper):
        hyper = TrainHyper.from_dict(hyper)
    if len(dataset.labels) == 0:
        raise EmptySplit("training split is empty")
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    lr, mom = np.float32(hyper.lr), np.float32(hyper.momentum)
    n = len(dataset.labels)
    stream = Stream(hyper.seed).child("train", model.architecture)
    losses = []
    for epoch in range(hyper.epochs):
        order = stream.child("shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            with T.Tape():
                leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
                tape = T.current_tape()
                for leaf in leaves.values():
                    tape.register_leaf(leaf)
                try:
                    logits = forward(model, T.constant(dataset.images[idx]), params=leaves)
                    loss = T.cross_entropy_logits(logits, dataset.labels[idx])
                except NonFiniteResult as e:
                    raise DivergedTraining(f"epoch {epoch}: {e}") from None
                grads = T.backward(loss)
            for k, leaf in leaves.items():
                g = grads[leaf].data
                velocity[k] = mom * velocity[k] + g
                params[k] = params[k] - lr * velocity[k]
            total += loss.item() * len(idx)
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise DivergedTraining(f"epoch {epoch}: loss is not finite")
        losses.append(epoch_loss)
        if log is not None:
            log(f"{model.architecture} epoch {epoch + 1}/{hyper.epochs} loss {epoch_loss:.4f}")
    trained = Model(model.config, params)
    metrics = {"train_accuracy": accuracy(trained, dataset), "final_loss": losses[-1] if losses else None}
    if test is not None:
        metrics["test_accuracy"] = accuracy(trained, test)
    trained.metadata = {"metrics": metrics, "training": hyper.to_dict()}
    return trained, metrics
