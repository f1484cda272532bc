"""Experiment harness: transfer matrices, diagnostics, sweeps, ablations, defenses.

Success is untargeted misclassification. Rates are reported on the samples
the victim classifies correctly when clean ("filtered"), alongside the rate
over all samples ("unfiltered"). Every cell derives its random stream from
``(experiment seed, cell coordinates)``, so cells can run in any order or in
parallel and still agree bitwise.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tc
from .attacks import AdvBatch, AttackConfig, ModelView, input_diversity, run_attack, view_logits
from .errors import (
    DegenerateLogits,
    IncompatibleModels,
    InvalidGrid,
    InvalidLevels,
    NoEligibleSamples,
)
from .feature_aug import HookConfig, default_hook_for
from .models import Model, accuracy, logits_of
from .rng import Stream

FILTERING = "victim-correct-clean"


@dataclass(frozen=True)
class SuccessRate:
    filtered: float
    unfiltered: float
    eligible: int
    total: int


def _predict(victim, images, defense=None):
    if defense is not None:
        images = defense(images)
    if isinstance(victim, ModelView):
        return view_logits(victim, images).argmax(axis=1)
    return logits_of(victim, images).argmax(axis=1)


def attack_success_rate(victim, adv: AdvBatch, defense: Callable | None = None) -> SuccessRate:
    """Fraction of victim-correct clean samples whose adversarial is misclassified.

    ``defense`` (optional) preprocesses both clean and adversarial inputs.
    """
    clean_ok = _predict(victim, adv.originals, defense) == adv.labels
    fooled = _predict(victim, adv.adversarials, defense) != adv.labels
    eligible = int(clean_ok.sum())
    if eligible == 0:
        raise NoEligibleSamples("victim misclassifies every clean sample")
    return SuccessRate(
        filtered=float((fooled & clean_ok).sum() / eligible),
        unfiltered=float(fooled.mean()),
        eligible=eligible,
        total=len(adv.labels),
    )


def select_eval_indices(n_total: int, n_eval: int, seed: int) -> np.ndarray:
    """Seeded subset of test indices (sorted) used by one experiment seed."""
    if n_eval >= n_total:
        return np.arange(n_total)
    idx = Stream(seed).child("eval-subset").permutation(n_total)[:n_eval]
    return np.sort(idx)


# -- transfer matrices -------------------------------------------------------------------


@dataclass
class TransferMatrix:
    surrogates: list
    victims: list
    rates: np.ndarray
    unfiltered: np.ndarray
    white_box: np.ndarray
    metadata: dict = field(default_factory=dict)

    def row_avg(self, surrogate) -> float:
        """Mean rate over the row's black-box (non-white-box) victims."""
        i = self.surrogates.index(surrogate)
        mask = ~self.white_box[i]
        return float(self.rates[i, mask].mean()) if mask.any() else float("nan")

    def averages(self) -> dict:
        return {s: self.row_avg(s) for s in self.surrogates}

    def rate(self, surrogate, victim) -> float:
        return float(self.rates[self.surrogates.index(surrogate), self.victims.index(victim)])

    def rows(self) -> list[dict]:
        out = []
        for i, s in enumerate(self.surrogates):
            for j, v in enumerate(self.victims):
                out.append(
                    {
                        "surrogate": s,
                        "victim": v,
                        "rate": float(self.rates[i, j]),
                        "white_box": bool(self.white_box[i, j]),
                        "filtered": True,
                        "unfiltered_rate": float(self.unfiltered[i, j]),
                    }
                )
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "transfer_matrix",
            "surrogates": list(self.surrogates),
            "victims": list(self.victims),
            "rates": self.rates.tolist(),
            "unfiltered": self.unfiltered.tolist(),
            "white_box": self.white_box.tolist(),
            "averages": self.averages(),
            "filtering": FILTERING,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferMatrix":
        return cls(
            surrogates=list(d["surrogates"]),
            victims=list(d["victims"]),
            rates=np.asarray(d["rates"], dtype=np.float64),
            unfiltered=np.asarray(d["unfiltered"], dtype=np.float64),
            white_box=np.asarray(d["white_box"], dtype=bool),
            metadata=d.get("metadata", {}),
        )

    def __eq__(self, other):
        if not isinstance(other, TransferMatrix):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _check_compatible(models: Mapping[str, Model]) -> None:
    shapes = {(tuple(m.config.input_shape), m.config.num_classes) for m in models.values()}
    if len(shapes) != 1:
        raise IncompatibleModels(f"models disagree on input/output shapes: {sorted(shapes)}")
    data = {m.metadata.get("data_fingerprint") for m in models.values()}
    if len(data) > 1:
        raise IncompatibleModels("models were trained on different datasets")


def _row(args) -> tuple:
    """One surrogate row: attack once, evaluate on every victim."""
    view, victim_items, images, labels, cfg, stream, defense = args
    adv = run_attack(view, images, labels, cfg, stream)
    rates = [attack_success_rate(victim, adv, defense) for _, victim in victim_items]
    return (
        [r.filtered for r in rates],
        [r.unfiltered for r in rates],
        adv.white_box_rate,
        int(adv.dead.sum()),
    )


def run_cells(fn, tasks: list, jobs: int = 1) -> list:
    """Evaluate ``fn`` over ``tasks``, serially or in a process pool, in order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def cell_stream(seed: int, *coords) -> Stream:
    return Stream(seed).child("cell", *coords)


def resolve_hook(model: Model, policy: str, overrides: Mapping | None = None, key=None):
    if policy == "none":
        return None
    if policy != "faug":
        raise IncompatibleModels(f"unknown hook policy {policy!r}")
    if overrides and key in overrides and overrides[key] is not None:
        h = overrides[key]
        return h if isinstance(h, HookConfig) else HookConfig.from_dict(h)
    return default_hook_for(model.architecture)


def transfer_matrix(
    models: Mapping[str, Model],
    cfg: AttackConfig,
    hook_policy: str,
    dataset,
    seed: int,
    n_eval: int = 500,
    hooks: Mapping | None = None,
    surrogates: Sequence[str] | None = None,
    defense: Callable | None = None,
    jobs: int = 1,
) -> TransferMatrix:
    """Attack with each surrogate (hooked iff ``faug``) and score on all victims."""
    _check_compatible(models)
    names = list(models)
    surrogates = list(surrogates) if surrogates is not None else names
    idx = select_eval_indices(len(dataset.labels), n_eval, seed)
    images, labels = dataset.images[idx], dataset.labels[idx]
    victim_items = [(n, models[n]) for n in names]
    tasks, used_hooks = [], {}
    for s in surrogates:
        hook = resolve_hook(models[s], hook_policy, hooks, s)
        used_hooks[s] = hook.to_dict() if hook else None
        stream = cell_stream(seed, "transfer", names.index(s))
        tasks.append((ModelView.single(models[s], hook), victim_items, images, labels, cfg, stream, defense))
    results = run_cells(_row, tasks, jobs)
    rates = np.array([r[0] for r in results])
    unfiltered = np.array([r[1] for r in results])
    white_box = np.array([[v == s for v in names] for s in surrogates])
    return TransferMatrix(
        surrogates=surrogates,
        victims=names,
        rates=rates,
        unfiltered=unfiltered,
        white_box=white_box,
        metadata={
            "attack": cfg.to_dict(),
            "hook_policy": hook_policy,
            "hooks": used_hooks,
            "seed": seed,
            "n_eval": len(idx),
            "filtering": FILTERING,
            "white_box_rates": {s: r[2] for s, r in zip(surrogates, results)},
            "dead_iterations": {s: r[3] for s, r in zip(surrogates, results)},
        },
    )


def ensemble_transfer(
    members: Mapping[str, Model],
    victims: Mapping[str, Model],
    cfg: AttackConfig,
    hook_policy: str,
    dataset,
    seed: int,
    n_eval: int = 500,
) -> dict:
    """Attack a logit-averaging ensemble; score on every victim.

    Victims that are ensemble members count as white-box; AVG is over the rest.
    """
    idx = select_eval_indices(len(dataset.labels), n_eval, seed)
    images, labels = dataset.images[idx], dataset.labels[idx]
    hooks = [resolve_hook(m, hook_policy) for m in members.values()]
    view = ModelView.ensemble(list(members.values()), hooks)
    adv = run_attack(view, images, labels, cfg, cell_stream(seed, "ensemble"))
    rates = {n: attack_success_rate(v, adv).filtered for n, v in victims.items()}
    black = [r for n, r in rates.items() if n not in members]
    return {
        "members": list(members),
        "hook_policy": hook_policy,
        "rates": rates,
        "white_box": {n: n in members for n in victims},
        "avg": float(np.mean(black)) if black else float("nan"),
        "ensemble_white_box_rate": adv.white_box_rate,
        "seed": seed,
    }


# -- cosine diagnostic -------------------------------------------------------------


@dataclass(frozen=True)
class CosineStats:
    mean: float
    std: float
    arm: str
    n: int

    def to_dict(self) -> dict:
        return {"arm": self.arm, "mean": self.mean, "std": self.std, "n": self.n}


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateLogits("zero-norm logit vector")
    return (a * b).sum(axis=1) / (na * nb)


def diversity_transform(prob: float = 1.0, low: int = 13, high: int = 16):
    """Per-image random resize-and-pad, the input-transform arm's default."""

    def transform(images: np.ndarray, rng: Stream) -> np.ndarray:
        out = np.empty_like(images)
        for i in range(len(images)):
            out[i] = input_diversity(tc.constant(images[i : i + 1]), prob, low, high, rng.child(i)).data[0]
        return out

    return transform


def cosine_diagnostic(model: Model, images: np.ndarray, transform, hook: HookConfig, seed: int, min_size: int = 100):
    """Logit cosine: clean vs transformed input, and plain vs hooked model.

    Returns ``(input_arm, feature_arm)``.
    """
    if len(images) < min_size:
        raise ValueError(f"cosine diagnostic needs at least {min_size} images, got {len(images)}")
    root = Stream(seed).child("cosine")
    clean = logits_of(model, images)
    transformed = transform(images, root.child("input")) if transform is not None else images
    arm_a = _row_cosines(clean, logits_of(model, transformed))
    arm_b = _row_cosines(clean, logits_of(model, images, hooks=[hook], rng=root.child("hook")))
    return (
        CosineStats(float(arm_a.mean()), float(arm_a.std()), "input-transform", len(arm_a)),
        CosineStats(float(arm_b.mean()), float(arm_b.std()), "feature-hook", len(arm_b)),
    )


# -- mu / sigma sweep -----------------------------------------------------------------

MU_GRID = (0.0, 0.1, 0.25, 0.5)
SIGMA_GRID = (0.0, 0.1, 0.3, 0.6)


def mu_sigma_accuracy_sweep(model: Model, dataset, mus=MU_GRID, sigmas=SIGMA_GRID, seed: int = 0, layer=None) -> dict:
    """Hooked test accuracy for every (mu, sigma) pair at one layer."""
    layer = layer or default_hook_for(model.architecture).layer
    table = {}
    for i, mu in enumerate(mus):
        for j, sigma in enumerate(sigmas):
            hook = HookConfig(layer, "normal", mu=float(mu), sigma=float(sigma))
            rng = Stream(seed).child("musigma", i, j)
            table[(float(mu), float(sigma))] = accuracy(model, dataset, hooks=[hook], rng=rng)
    return table


# -- ablations ----------------------------------------------------------------------

DIMENSIONS = ("layer", "sigma", "noise_type", "mu")


@dataclass
class AblationResult:
    dimension: str
    grid: list
    rows: list
    averages: list
    best: object
    surrogate: str
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "ablation",
            "dimension": self.dimension,
            "surrogate": self.surrogate,
            "grid": [g.to_dict() if isinstance(g, HookConfig) else g for g in self.grid],
            "rows": self.rows,
            "averages": self.averages,
            "best": self.best.to_dict() if isinstance(self.best, HookConfig) else self.best,
            "metadata": self.metadata,
        }

    def plot_data(self) -> list[tuple]:
        xs = [g.describe() if isinstance(g, HookConfig) else g for g in self.grid]
        return list(zip(xs, self.averages))


def ablation_hooks(dimension: str, grid, base: HookConfig) -> list[HookConfig]:
    if dimension not in DIMENSIONS:
        raise InvalidGrid(f"unknown ablation dimension {dimension!r}")
    if not grid:
        raise InvalidGrid("grid is empty")
    hooks = []
    for g in grid:
        if dimension == "layer":
            h = replace(base, layer=str(g))
        elif dimension == "sigma":
            h = replace(base, kind="normal", sigma=float(g))
        elif dimension == "mu":
            h = replace(base, kind="normal", mu=float(g))
        else:
            h = g if isinstance(g, HookConfig) else HookConfig.from_dict({"layer": base.layer, **g})
        try:
            h.validate()
        except Exception as e:
            raise InvalidGrid(f"invalid grid value {g!r}: {e}") from None
        hooks.append(h)
    return hooks


def noise_type_grid(sigma: float, p: float = 0.3) -> list[dict]:
    """normal(sigma), uniform(+-sigma), dropout(p)."""
    return [
        {"kind": "normal", "sigma": sigma},
        {"kind": "uniform", "low": -sigma, "high": sigma},
        {"kind": "dropout", "p": p},
    ]


def _ablation_cell(args):
    view, victim_items, images, labels, cfg, stream = args
    adv = run_attack(view, images, labels, cfg, stream)
    return [attack_success_rate(v, adv).filtered for _, v in victim_items]


def ablate(
    dimension: str,
    grid,
    surrogate: str,
    models: Mapping[str, Model],
    cfg: AttackConfig,
    dataset,
    seed: int,
    n_eval: int = 500,
    base_hook: HookConfig | None = None,
    jobs: int = 1,
) -> AblationResult:
    """Sweep one hook dimension on a surrogate; record black-box AVG per value.

    The attack stream is the surrogate's transfer-matrix stream, so a grid
    value equivalent to no hook reproduces the unhooked row exactly.
    """
    names = list(models)
    if surrogate not in models:
        raise InvalidGrid(f"unknown surrogate {surrogate!r}")
    model = models[surrogate]
    base = base_hook or default_hook_for(model.architecture)
    hooks = ablation_hooks(dimension, grid, base)
    for h in hooks:
        if h.layer not in model.layer_names:
            raise InvalidGrid(f"{surrogate} has no layer {h.layer!r}")
    idx = select_eval_indices(len(dataset.labels), n_eval, seed)
    images, labels = dataset.images[idx], dataset.labels[idx]
    victim_items = [(n, models[n]) for n in names]
    stream = cell_stream(seed, "transfer", names.index(surrogate))
    tasks = [(ModelView.single(model, h), victim_items, images, labels, cfg, stream) for h in hooks]
    results = run_cells(_ablation_cell, tasks, jobs)
    rows, avgs = [], []
    for h, rates in zip(hooks, results):
        rows.append(dict(zip(names, rates)))
        avgs.append(float(np.mean([r for n, r in zip(names, rates) if n != surrogate])))
    best_i = int(np.argmax(avgs))  # first maximum on ties
    grid_out = list(grid) if dimension in ("layer", "sigma", "mu") else hooks
    return AblationResult(
        dimension=dimension,
        grid=grid_out,
        rows=rows,
        averages=avgs,
        best=grid_out[best_i],
        surrogate=surrogate,
        metadata={"attack": cfg.to_dict(), "seed": seed, "n_eval": len(idx), "hooks": [h.to_dict() for h in hooks]},
    )


# -- defenses -------------------------------------------------------------------------


def defense_quantize(x: np.ndarray, levels: int) -> np.ndarray:
    """Round pixels onto ``levels`` evenly spaced values in [0, 1]."""
    if levels < 2:
        raise InvalidLevels(f"need at least 2 levels, got {levels}")
    q = np.float32(levels - 1)
    return (np.round(np.asarray(x, dtype=np.float32) * q) / q).astype(np.float32)


def defense_resize_pad(x: np.ndarray, rng: Stream, low: int = 13, high: int = 16) -> np.ndarray:
    """Random resize-and-pad applied with probability one."""
    return input_diversity(tc.constant(x), 1.0, low, high, rng).data.copy()
