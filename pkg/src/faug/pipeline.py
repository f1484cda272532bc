"""End-to-end experiment pipeline behind the CLI and the acceptance suite.

Each phase is a pure function of (config, trained models, seed) and returns
plain data. ``run_all`` strings the phases together into one summary, which
``repro`` compares against the committed goldens.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import replace
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from .attacks import AttackConfig, ModelView, run_attack
from .checkpoint import encode, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Splits, gen_dataset
from .errors import CheckpointIOError, CorruptCheckpoint, VersionMismatch
from .evaluation import (
    ablate,
    attack_success_rate,
    cell_stream,
    cosine_diagnostic,
    defense_quantize,
    defense_resize_pad,
    diversity_transform,
    ensemble_transfer,
    mu_sigma_accuracy_sweep,
    noise_type_grid,
    run_cells,
    select_eval_indices,
    transfer_matrix,
)
from .feature_aug import default_hook_for
from .models import Model, build_model, train
from .report import to_plain

GOLDEN_NAME = "default.json"


def _noop(msg: str) -> None:
    pass


# -- data and models ------------------------------------------------------------------


def make_data(cfg: ExperimentConfig) -> Splits:
    return gen_dataset(cfg.dataset, cfg.data_seed)


def data_fingerprint(splits: Splits) -> str:
    h = hashlib.sha256()
    for part in splits:
        h.update(np.ascontiguousarray(part.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(part.labels, dtype="<i8").tobytes())
    return h.hexdigest()


def _train_task(args) -> Model:
    entry, splits, fingerprint, meta = args
    model, _ = train(build_model(entry.config), splits.train, entry.hyper, test=splits.test)
    model.metadata.update({"id": entry.id, "entry": entry.to_dict(), "data_fingerprint": fingerprint, **meta})
    return model


def _reusable(path: Path, entry, fingerprint: str) -> Model | None:
    if not path.is_file():
        return None
    try:
        model = load_checkpoint(path)
    except (CorruptCheckpoint, VersionMismatch, CheckpointIOError):
        return None
    md = model.metadata
    if md.get("entry") == entry.to_dict() and md.get("data_fingerprint") == fingerprint:
        return model
    return None


def train_models(cfg: ExperimentConfig, splits: Splits, jobs: int = 1, ckpt_dir=None, reuse: bool = False,
                 ids=None, log: Callable = _noop) -> dict:
    """Train (or reload) every configured model; returns ``{id: Model}`` in config order."""
    fingerprint = data_fingerprint(splits)
    entries = [m for m in cfg.models if ids is None or m.id in ids]
    meta = {"master_seed": cfg.seed, "config": cfg.resolved()}
    models, tasks = {}, []
    for e in entries:
        cached = _reusable(Path(ckpt_dir) / f"{e.id}.ckpt", e, fingerprint) if (reuse and ckpt_dir) else None
        if cached is not None:
            log(f"reusing checkpoint {e.id}")
            models[e.id] = cached
        else:
            tasks.append((e, splits, fingerprint, meta))
    for (e, *_), model in zip(tasks, run_cells(_train_task, tasks, jobs)):
        log(f"trained {e.id}: test accuracy {model.metadata['metrics']['test_accuracy']:.4f}")
        models[e.id] = model
        if ckpt_dir is not None:
            save_checkpoint(model, Path(ckpt_dir) / f"{e.id}.ckpt")
    return {e.id: models[e.id] for e in entries}


def checkpoint_digest(model: Model) -> str:
    return hashlib.sha256(encode(model)).hexdigest()


def training_summary(models: dict) -> dict:
    return {
        mid: {
            "architecture": m.architecture,
            "metrics": m.metadata.get("metrics", {}),
            "sha256": checkpoint_digest(m),
        }
        for mid, m in models.items()
    }


# -- phases ---------------------------------------------------------------------------


def _zoo(cfg: ExperimentConfig, models: dict) -> dict:
    return {m.id: models[m.id] for m in cfg.zoo}


def _held_out(cfg: ExperimentConfig, models: dict) -> dict:
    return {m.id: models[m.id] for m in cfg.held_out}


def _seeds(cfg: ExperimentConfig) -> list:
    return [int(s) for s in cfg.sweeps.get("seeds", [cfg.seed])]


def _hooks_for(cfg: ExperimentConfig, zoo: dict) -> dict:
    return {k: v for k, v in cfg.hooks.items() if k in zoo}


def matrix_pair(cfg, models, splits, seed, attack: AttackConfig, n_eval: int, jobs: int = 1) -> dict:
    """Plain and FAUG transfer matrices for one seed and attack config."""
    zoo = _zoo(cfg, models)
    hooks = _hooks_for(cfg, zoo)
    return {
        policy: transfer_matrix(zoo, attack, policy, splits.test, seed, n_eval=n_eval, hooks=hooks, jobs=jobs)
        for policy in ("none", "faug")
    }


def transfer_phase(cfg, models, splits, jobs=1, log=_noop) -> dict:
    """Default-attack matrices over every experiment seed."""
    n_eval = int(cfg.sweeps.get("n_eval", 500))
    out = {}
    for seed in _seeds(cfg):
        log(f"transfer matrices, seed {seed}")
        out[str(seed)] = {k: m.to_dict() for k, m in matrix_pair(cfg, models, splits, seed, cfg.attack, n_eval, jobs).items()}
    return out


def combination_phase(cfg, models, splits, jobs=1, log=_noop) -> dict:
    spec = cfg.sweeps.get("combination", {})
    n_eval = int(spec.get("n_eval", cfg.sweeps.get("n_eval", 500)))
    out = {}
    for variant in spec.get("variants", []):
        attack = replace(cfg.attack, variant=variant)
        out[variant] = {}
        for seed in _seeds(cfg):
            log(f"{variant} matrices, seed {seed}")
            pair = matrix_pair(cfg, models, splits, seed, attack, n_eval, jobs)
            out[variant][str(seed)] = {k: m.to_dict() for k, m in pair.items()}
    return out


def _ensemble_task(args):
    members, victims, attack, policy, test, seed, n_eval = args
    return ensemble_transfer(members, victims, attack, policy, test, seed, n_eval)


def ensemble_phase(cfg, models, splits, jobs=1, log=_noop) -> dict:
    zoo, held = _zoo(cfg, models), _held_out(cfg, models)
    if not held:
        return {}
    n_eval = int(cfg.sweeps.get("ensemble", {}).get("n_eval", cfg.sweeps.get("n_eval", 500)))
    tasks = [(zoo, held, cfg.attack, policy, splits.test, seed, n_eval)
             for seed in _seeds(cfg) for policy in ("none", "faug")]
    log(f"ensemble attacks: {len(tasks)} runs")
    results = run_cells(_ensemble_task, tasks, jobs)
    out = {}
    for (_, _, _, policy, _, seed, _), r in zip(tasks, results):
        out.setdefault(str(seed), {})[policy] = r
    return out


def _cosine_task(args):
    model, images, attack, seed = args
    transform = diversity_transform(1.0, attack.di_low, attack.di_high)
    a, b = cosine_diagnostic(model, images, transform, default_hook_for(model.architecture), seed)
    return {"input": a.to_dict(), "feature": b.to_dict()}


def cosine_phase(cfg, models, splits, jobs=1, log=_noop) -> dict:
    n = int(cfg.sweeps.get("cosine", {}).get("n", 200))
    zoo = _zoo(cfg, models)
    tasks, keys = [], []
    for seed in _seeds(cfg):
        idx = select_eval_indices(len(splits.test.labels), n, seed)
        for mid, model in zoo.items():
            tasks.append((model, splits.test.images[idx], cfg.attack, seed))
            keys.append((str(seed), mid))
    log(f"cosine diagnostic: {len(tasks)} runs")
    out = {}
    for (s, mid), r in zip(keys, run_cells(_cosine_task, tasks, jobs)):
        out.setdefault(s, {})[mid] = r
    return out


def _musigma_task(args):
    model, test, mus, sigmas, seed = args
    table = mu_sigma_accuracy_sweep(model, test, mus, sigmas, seed)
    return [{"mu": mu, "sigma": sigma, "accuracy": acc} for (mu, sigma), acc in table.items()]


def musigma_phase(cfg, models, splits, jobs=1, log=_noop) -> dict:
    spec = cfg.sweeps.get("musigma", {})
    mus = [float(v) for v in spec.get("mu", (0.0, 0.1, 0.25, 0.5))]
    sigmas = [float(v) for v in spec.get("sigma", (0.0, 0.1, 0.3, 0.6))]
    archs = spec.get("architectures", ["cnn_a", "cnn_b"])
    targets = [(mid, m) for mid, m in _zoo(cfg, models).items() if m.architecture in archs]
    tasks, keys = [], []
    for mid, model in targets:
        for seed in _seeds(cfg):
            tasks.append((model, splits.test, mus, sigmas, seed))
            keys.append((mid, str(seed)))
    log(f"mu/sigma sweep: {len(tasks)} tables")
    out = {}
    for (mid, s), r in zip(keys, run_cells(_musigma_task, tasks, jobs)):
        out.setdefault(mid, {})[s] = r
    return out


def ablation_phase(cfg, models, splits, jobs=1, log=_noop) -> list:
    zoo = _zoo(cfg, models)
    n_eval = int(cfg.sweeps.get("n_eval", 500))
    out = []
    for spec in cfg.sweeps.get("ablations", []):
        dim, surrogate = spec["dimension"], spec["surrogate"]
        if dim == "noise_type":
            grid = noise_type_grid(float(spec.get("sigma", 0.3)), float(spec.get("p", 0.3)))
        else:
            grid = spec["grid"]
        per_seed = {}
        for seed in _seeds(cfg):
            log(f"ablation {dim} on {surrogate}, seed {seed}")
            res = ablate(dim, grid, surrogate, zoo, cfg.attack, splits.test, seed, n_eval=n_eval,
                         base_hook=cfg.hooks.get(surrogate), jobs=jobs)
            per_seed[str(seed)] = res.to_dict()
        out.append({"dimension": dim, "surrogate": surrogate, "seeds": per_seed})
    return out


def _defense_fns(levels: int, seed: int) -> dict:
    return {
        "none": None,
        f"quantize{levels}": partial(defense_quantize, levels=levels),
        "resize_pad": partial(defense_resize_pad, rng=cell_stream(seed, "defense", "resize_pad")),
    }


def defense_phase(cfg, models, splits, jobs=1, log=_noop) -> dict:
    """Defended success rates for one surrogate's plain and FAUG attacks.

    Emits both Table-3 aggregations: per defense averaged over victims, and
    per victim averaged over defenses.
    """
    spec = cfg.sweeps.get("defense", {})
    zoo = _zoo(cfg, models)
    names = list(zoo)
    surrogate = spec.get("surrogate", names[0])
    levels = int(spec.get("quantize_levels", 8))
    n_eval = int(cfg.sweeps.get("n_eval", 500))
    out = {}
    for seed in _seeds(cfg):
        log(f"defenses, seed {seed}")
        idx = select_eval_indices(len(splits.test.labels), n_eval, seed)
        images, labels = splits.test.images[idx], splits.test.labels[idx]
        stream = cell_stream(seed, "transfer", names.index(surrogate))
        seed_out = {}
        for policy in ("none", "faug"):
            hook = None if policy == "none" else cfg.hooks.get(surrogate, default_hook_for(zoo[surrogate].architecture))
            adv = run_attack(ModelView.single(zoo[surrogate], hook), images, labels, cfg.attack, stream)
            table = {}
            for dname, fn in _defense_fns(levels, seed).items():
                table[dname] = {v: attack_success_rate(zoo[v], adv, fn).filtered for v in names if v != surrogate}
            seed_out[policy] = {
                "rates": table,
                "avg_over_victims": {d: float(np.mean(list(r.values()))) for d, r in table.items()},
                "avg_over_defenses": {
                    v: float(np.mean([table[d][v] for d in table if d != "none"])) for v in names if v != surrogate
                },
            }
        out[str(seed)] = seed_out
    return {"surrogate": surrogate, "victim": spec.get("victim"), "quantize_levels": levels, "seeds": out}


PHASES = {
    "transfer": transfer_phase,
    "combination": combination_phase,
    "ensemble": ensemble_phase,
    "cosine": cosine_phase,
    "musigma": musigma_phase,
    "ablations": ablation_phase,
    "defense": defense_phase,
}


def run_all(cfg: ExperimentConfig, jobs: int = 1, ckpt_dir=None, log: Callable = _noop, phases=None,
            timings: dict | None = None) -> dict:
    """Regenerate data, train every model, and run every phase.

    Wall-clock seconds per stage go into ``timings`` when given; they are
    kept out of the summary so it stays a pure function of the config.
    """
    clock = timings if timings is not None else {}
    start = time.perf_counter()
    splits = make_data(cfg)
    models = train_models(cfg, splits, jobs=jobs, ckpt_dir=ckpt_dir, reuse=False, log=log)
    clock["training"] = time.perf_counter() - start
    summary = {
        "seed": cfg.seed,
        "config": cfg.resolved(),
        "data_fingerprint": data_fingerprint(splits),
        "training": training_summary(models),
    }
    for name, fn in PHASES.items():
        if phases is None or name in phases:
            t0 = time.perf_counter()
            summary[name] = fn(cfg, models, splits, jobs=jobs, log=log)
            clock[name] = time.perf_counter() - t0
    clock["total"] = time.perf_counter() - start
    return to_plain(summary)


# -- goldens --------------------------------------------------------------------------


def golden_path() -> Path:
    return Path(__file__).resolve().parent / "goldens" / GOLDEN_NAME


def load_goldens(path=None) -> dict | None:
    p = Path(path) if path else golden_path()
    if not p.is_file():
        return None
    return json.loads(p.read_text())


def normalise(summary: dict) -> dict:
    """JSON round trip, so in-memory results compare like files on disk."""
    return json.loads(json.dumps(to_plain(summary)))


def diff_goldens(actual: dict, expected: dict, prefix: str = "") -> list[str]:
    """Paths at which two summaries differ (exact comparison)."""
    if isinstance(actual, dict) and isinstance(expected, dict):
        out = []
        for k in sorted(set(actual) | set(expected)):
            p = f"{prefix}/{k}"
            if k not in actual or k not in expected:
                out.append(p)
            else:
                out.extend(diff_goldens(actual[k], expected[k], p))
        return out
    if isinstance(actual, list) and isinstance(expected, list):
        if len(actual) != len(expected):
            return [prefix]
        out = []
        for i, (a, e) in enumerate(zip(actual, expected)):
            out.extend(diff_goldens(a, e, f"{prefix}[{i}]"))
        return out
    if actual != expected and not (isinstance(actual, float) and isinstance(expected, float)
                                   and np.isnan(actual) and np.isnan(expected)):
        return [prefix or "/"]
    return []
