"""L-infinity iterative gradient attacks and their feature-augmented forms.

Every variant shares one momentum loop (:func:`momentum_loop`) and differs
only in how the loss gradient is taken at each iteration: at a Nesterov
lookahead point, through a random resize-and-pad of the input, averaged over
scaled copies, smoothed by a Gaussian kernel, or corrected by neighbourhood
variance. Feature augmentation is not a variant: it is a property of the
:class:`ModelView` being attacked, so any variant runs against a hooked view
unchanged.

Randomness is drawn from named substreams (``chunk/iter/hook``,
``chunk/iter/di``, ``chunk/iter/vt``...), so adding or removing a hook never
shifts the draws of any other stochastic component.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .errors import ConfigInvalid, InvalidKernel, InvalidSizes, ShapeMismatch
from .feature_aug import HookConfig
from .models import Model, forward, logits_of
from .rng import Stream

VARIANTS = ("ifgsm", "mifgsm", "nifgsm", "difgsm", "tifgsm", "sinifgsm", "vmifgsm", "vnifgsm")

DEAD_L1 = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    variant: str = "mifgsm"
    epsilon: float = 16 / 255
    alpha: float = 2 / 255
    iterations: int = 10
    xi: float = 1.0
    di_prob: float = 0.5
    di_low: int = 13
    di_high: int = 16
    ti_kernel_size: int = 5
    ti_kernel_sigma: float = 1.5
    si_scales: int = 5
    vt_samples: int = 5
    vt_beta: float = 1.5
    chunk: int = 250

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"unknown attack variant {self.variant!r}")
        if not self.epsilon >= 0:
            raise ConfigInvalid("epsilon must be >= 0")
        if not self.alpha > 0:
            raise ConfigInvalid("alpha must be > 0")
        if self.iterations < 1:
            raise ConfigInvalid("iterations (T) must be >= 1")
        if not self.xi >= 0:
            raise ConfigInvalid("xi must be >= 0")
        if not 0 <= self.di_prob <= 1 or not 1 <= self.di_low <= self.di_high:
            raise ConfigInvalid("diversity needs 0 <= prob <= 1 and 1 <= low <= high")
        if self.si_scales < 1:
            raise ConfigInvalid("si_scales must be >= 1")
        if self.vt_samples < 1 or self.vt_beta < 0:
            raise ConfigInvalid("variance tuning needs N >= 1 and beta >= 0")
        if self.chunk < 1:
            raise ConfigInvalid("chunk must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "AttackConfig":
        d = dict(d or {})
        if "T" in d:
            d["iterations"] = d.pop("T")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown attack keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class Member:
    model: Model
    hooks: tuple = ()

    @property
    def name(self) -> str:
        return self.model.metadata.get("id", self.model.architecture)


@dataclass(frozen=True)
class ModelView:
    """One model or a logit-averaging ensemble, each with optional hooks."""

    members: tuple

    @classmethod
    def single(cls, model: Model, hook: HookConfig | None = None) -> "ModelView":
        return cls((Member(model, (hook,) if hook is not None else ()),))

    @classmethod
    def ensemble(cls, models: Sequence[Model], hooks: Sequence[HookConfig | None] | None = None):
        hooks = list(hooks) if hooks is not None else [None] * len(models)
        return cls(tuple(Member(m, (h,) if h is not None else ()) for m, h in zip(models, hooks)))

    def without_hooks(self) -> "ModelView":
        return ModelView(tuple(Member(m.model) for m in self.members))

    @property
    def hooked(self) -> bool:
        return any(m.hooks for m in self.members)

    def describe(self) -> dict:
        return {
            "members": [
                {"model": m.name, "hooks": [h.to_dict() for h in m.hooks]} for m in self.members
            ]
        }


@dataclass
class AdvBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    success: np.ndarray
    dead: np.ndarray
    config: dict
    seed: int
    indices: np.ndarray | None = None
    view: dict = field(default_factory=dict)

    @property
    def white_box_rate(self) -> float:
        return float(self.success.mean()) if len(self.success) else 0.0

    def max_perturbation(self) -> float:
        return float(np.abs(self.adversarials.astype(np.float64) - self.originals).max(initial=0.0))


# -- projection ----------------------------------------------------------------


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp the perturbation elementwise to [-epsilon, epsilon]."""
    if x_adv.shape != x.shape:
        raise ShapeMismatch(f"project: {x_adv.shape} vs {x.shape}")
    eps = np.float32(epsilon)
    return x + np.clip(x_adv - x, -eps, eps)


def clamp01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, np.float32(0), np.float32(1))


# -- gradient transforms ---------------------------------------------------------


def input_diversity(x: tc.Tensor, prob: float, low: int, high: int, rng: Stream) -> tc.Tensor:
    """Random nearest-neighbour resize to side r in [low, high], zero-padded back.

    One coin flip per call decides whether the whole batch is transformed.
    """
    side = x.shape[-1]
    if not 1 <= low <= high <= side:
        raise InvalidSizes(f"need 1 <= low <= high <= {side}, got [{low}, {high}]")
    if not 0 <= prob <= 1:
        raise InvalidSizes(f"probability {prob} outside [0, 1]")
    u = rng.random()
    r = int(rng.integers(low, high))
    top = int(rng.integers(0, side - r))
    left = int(rng.integers(0, side - r))
    if u >= prob:
        return x
    return tc.resize_pad(x, r, top, left)


def translation_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalised discrete Gaussian; size 1 is the identity kernel."""
    if size < 1 or size % 2 == 0:
        raise InvalidKernel(f"kernel size must be a positive odd number, got {size}")
    if size == 1:
        return np.ones((1, 1), dtype=np.float32)
    if not sigma > 0:
        raise InvalidKernel(f"sigma must be > 0, got {sigma}")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return (k / k.sum()).astype(np.float32)


def smooth_gradient(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    n, c, h, w = grad.shape
    k = kernel.shape[0]
    out = tc.conv2d_array(grad.reshape(n * c, 1, h, w), kernel.reshape(1, 1, k, k), pad=k // 2)
    return out.reshape(n, c, h, w)


def l1_normalize(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample L1 normalisation; samples with norm < 1e-12 become zero."""
    norms = np.abs(grad).reshape(len(grad), -1).sum(axis=1, dtype=np.float32)
    dead = norms < DEAD_L1
    safe = np.where(dead, np.float32(1), norms).astype(np.float32)
    out = grad / safe.reshape((-1,) + (1,) * (grad.ndim - 1))
    out[dead] = 0
    return out, dead


# -- model evaluation --------------------------------------------------------------


def ensemble_logits(members: Sequence[Member], x: tc.Tensor, rng: Stream | None) -> tc.Tensor:
    """Arithmetic mean of member logits; hooks draw from per-member substreams."""
    if not members:
        raise ShapeMismatch("ensemble needs at least one member")
    outs = []
    for i, m in enumerate(members):
        sub = rng.child("member", i) if (rng is not None and m.hooks) else None
        outs.append(forward(m.model, x, hooks=m.hooks or None, rng=sub))
    if len({o.shape for o in outs}) != 1:
        raise ShapeMismatch(f"member logits disagree: {[o.shape for o in outs]}")
    if len(outs) == 1:
        return outs[0]
    total = outs[0]
    for o in outs[1:]:
        total = tc.add(total, o)
    return tc.scale(total, 1.0 / len(outs))


def view_logits(view: ModelView, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    if len(view.members) == 1 and not view.members[0].hooks:
        return logits_of(view.members[0].model, images, batch_size=batch_size)
    out = []
    for i in range(0, len(images), batch_size):
        out.append(ensemble_logits(view.members, tc.constant(images[i : i + batch_size]), None).data)
    return np.concatenate(out)


def loss_gradient(
    view: ModelView,
    x: np.ndarray,
    labels: np.ndarray,
    rng: Stream,
    transform: Callable[[tc.Tensor], tc.Tensor] | None = None,
) -> np.ndarray:
    """Gradient of the summed per-sample cross-entropy w.r.t. the input."""
    with tc.Tape() as tape:
        leaf = tc.Tensor(x, requires_grad=True)
        tape.register_leaf(leaf)
        inp = transform(leaf) if transform is not None else leaf
        logits = ensemble_logits(view.members, inp, rng)
        # summed (not averaged) loss so each sample sees its own gradient scale
        loss = tc.scale(tc.cross_entropy_logits(logits, labels), float(len(labels)))
        return tc.backward(loss)[leaf].data


# -- the loop ---------------------------------------------------------------------------


@dataclass
class LoopState:
    """What a gradient callback may look at: iteration, point, momentum."""

    t: int
    x_adv: np.ndarray
    momentum: np.ndarray


def momentum_loop(
    x: np.ndarray,
    grad_fn: Callable[[np.ndarray, LoopState], np.ndarray],
    epsilon: float,
    alpha: float,
    iterations: int,
    xi: float,
    nesterov: bool = False,
    post: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Momentum sign-gradient ascent with projection onto the epsilon ball.

    ``grad_fn(point, state)`` returns the raw gradient at ``point``; ``post``
    transforms it before L1 normalisation. Returns ``(x_adv, dead_counts)``.
    """
    x = np.asarray(x, dtype=np.float32)
    alpha32, xi32 = np.float32(alpha), np.float32(xi)
    x_adv = x.copy()
    g = np.zeros_like(x)
    dead_counts = np.zeros(len(x), dtype=np.int64)
    for t in range(iterations):
        point = x_adv + alpha32 * xi32 * g if nesterov else x_adv
        grad = grad_fn(point, LoopState(t, x_adv, g))
        if post is not None:
            grad = post(grad)
        normalized, dead = l1_normalize(grad)
        dead_counts += dead
        g = xi32 * g + normalized
        x_adv = clamp01(project(x_adv + alpha32 * np.sign(g), x, epsilon))
    return x_adv, dead_counts


def _gradient_callback(view, labels, cfg: AttackConfig, rng: Stream):
    variant = cfg.variant
    vt = variant in ("vmifgsm", "vnifgsm")
    scales = cfg.si_scales if variant == "sinifgsm" else 1
    state = {"v": None}

    def raw(point, it: Stream, tag: tuple):
        if variant == "difgsm":
            di = it.child(*tag, "di")
            transform = lambda t: input_diversity(t, cfg.di_prob, cfg.di_low, cfg.di_high, di)
            return loss_gradient(view, point, labels, it.child(*tag, "hook"), transform)
        if scales == 1:
            return loss_gradient(view, point, labels, it.child(*tag, "hook"))
        total = None
        for i in range(scales):
            factor = 1.0 / (2**i)
            transform = (lambda t, f=factor: tc.scale(t, f)) if i else None
            gi = loss_gradient(view, point, labels, it.child(*tag, "hook", i), transform)
            total = gi if total is None else total + gi
        return total / np.float32(scales)

    def grad_fn(point, st: LoopState):
        it = rng.child("iter", st.t)
        current = raw(point, it, ("main",))
        if not vt:
            return current
        v = state["v"]
        corrected = current if v is None else current + v
        radius = cfg.vt_beta * cfg.epsilon
        acc = None
        for j in range(cfg.vt_samples):
            noise = it.child("vt", j, "offset").uniform(-radius, radius, point.shape).astype(np.float32)
            gj = raw(point + noise, it, ("vt", j))
            acc = gj if acc is None else acc + gj
        state["v"] = acc / np.float32(cfg.vt_samples) - current
        return corrected

    return grad_fn


def _attack_chunk(view, x, labels, cfg: AttackConfig, rng: Stream):
    nesterov = cfg.variant in ("nifgsm", "sinifgsm", "vnifgsm")
    xi = 0.0 if cfg.variant == "ifgsm" else cfg.xi
    post = None
    if cfg.variant == "tifgsm":
        kernel = translation_kernel(cfg.ti_kernel_size, cfg.ti_kernel_sigma)
        post = lambda g: smooth_gradient(g, kernel)
    grad_fn = _gradient_callback(view, labels, cfg, rng)
    return momentum_loop(x, grad_fn, cfg.epsilon, cfg.alpha, cfg.iterations, xi, nesterov, post)


def run_attack(view: ModelView, batch: np.ndarray, labels: np.ndarray, cfg: AttackConfig, rng: Stream,
               indices=None) -> AdvBatch:
    """Craft adversarial examples for ``batch`` against ``view``.

    The batch is processed in fixed chunks of ``cfg.chunk`` samples, chunk
    ``k`` drawing from ``rng.child("chunk", k)``; results do not depend on how
    chunks are scheduled. Success flags use the clean (unhooked) view.
    """
    cfg.validate()
    batch = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if batch.ndim != 4 or len(batch) != len(labels):
        raise ShapeMismatch(f"batch {batch.shape} vs labels {labels.shape}")
    shapes = {tuple(m.model.config.input_shape) for m in view.members}
    classes = {m.model.config.num_classes for m in view.members}
    if len(shapes) != 1 or len(classes) != 1 or tuple(batch.shape[1:]) not in shapes:
        raise ShapeMismatch("view members disagree with each other or with the batch")
    adv = np.empty_like(batch)
    dead = np.zeros(len(batch), dtype=np.int64)
    for k, start in enumerate(range(0, len(batch), cfg.chunk)):
        sl = slice(start, start + cfg.chunk)
        adv[sl], dead[sl] = _attack_chunk(view, batch[sl], labels[sl], cfg, rng.child("chunk", k))
    clean_view = view.without_hooks()
    success = view_logits(clean_view, adv).argmax(axis=1) != labels
    return AdvBatch(
        originals=batch,
        adversarials=adv,
        labels=labels,
        success=success,
        dead=dead,
        config=cfg.to_dict(),
        seed=rng.seed,
        indices=None if indices is None else np.asarray(indices),
        view=view.describe(),
    )


def _variant(name):
    def attack(view, batch, labels, cfg: AttackConfig, rng: Stream) -> AdvBatch:
        return run_attack(view, batch, labels, replace(cfg, variant=name), rng)

    attack.__name__ = name
    attack.__doc__ = f"{name} attack; see :func:`run_attack`."
    return attack


ifgsm = _variant("ifgsm")
mifgsm = _variant("mifgsm")
nifgsm = _variant("nifgsm")
difgsm = _variant("difgsm")
tifgsm = _variant("tifgsm")
sinifgsm = _variant("sinifgsm")
vmifgsm = _variant("vmifgsm")
vnifgsm = _variant("vnifgsm")


def variance_tuned(view, batch, labels, cfg: AttackConfig, rng: Stream, base: str = "mi") -> AdvBatch:
    if base not in ("mi", "ni"):
        raise ConfigInvalid(f"variance tuning base must be 'mi' or 'ni', got {base!r}")
    return run_attack(view, batch, labels, replace(cfg, variant=f"v{base}fgsm"), rng)


# -- persistence ---------------------------------------------------------------------


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


def save_adv_batch(adv: AdvBatch, directory, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus raw little-endian float32 payloads."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "originals.f32").write_bytes(np.ascontiguousarray(adv.originals, dtype="<f4").tobytes())
    (d / "adversarials.f32").write_bytes(np.ascontiguousarray(adv.adversarials, dtype="<f4").tobytes())
    manifest = {
        "config": adv.config,
        "seed": adv.seed,
        "shape": list(adv.originals.shape),
        "labels": adv.labels.tolist(),
        "indices": None if adv.indices is None else adv.indices.tolist(),
        "success": adv.success.astype(int).tolist(),
        "dead_iterations": adv.dead.tolist(),
        "white_box_rate": adv.white_box_rate,
        "view": adv.view,
        "checksums": {
            "originals.f32": _digest(adv.originals),
            "adversarials.f32": _digest(adv.adversarials),
        },
    }
    if extra:
        manifest.update(extra)
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_adv_batch(directory) -> AdvBatch:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    shape = tuple(manifest["shape"])
    arrays = {}
    for name in ("originals.f32", "adversarials.f32"):
        arr = np.frombuffer((d / name).read_bytes(), dtype="<f4").astype(np.float32)
        if arr.size != int(np.prod(shape)) or _digest(arr) != manifest["checksums"][name]:
            raise ShapeMismatch(f"{name} does not match its manifest")
        arrays[name] = arr.reshape(shape)
    idx = manifest.get("indices")
    return AdvBatch(
        originals=arrays["originals.f32"],
        adversarials=arrays["adversarials.f32"],
        labels=np.asarray(manifest["labels"], dtype=np.int64),
        success=np.asarray(manifest["success"], dtype=bool),
        dead=np.asarray(manifest["dead_iterations"], dtype=np.int64),
        config=manifest["config"],
        seed=manifest["seed"],
        indices=None if idx is None else np.asarray(idx),
        view=manifest.get("view", {}),
    )
