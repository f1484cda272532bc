"""Command-line entry point: ``faug <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input (config, arguments, missing files),
2 golden mismatch in ``repro``, 3 I/O failure, 4 numerical failure
(diverged training, degenerate logits), 5 any other library error.
Errors are printed as a single ``error: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .attacks import ModelView, run_attack, save_adv_batch
from .config import ConfigNotFound, load_config
from .errors import (
    CheckpointIOError,
    ConfigInvalid,
    DegenerateLogits,
    DivergedTraining,
    FaugError,
    IncompatibleModels,
    InvalidGrid,
    InvalidSpec,
    NoEligibleSamples,
    NonFiniteResult,
    ReportIOError,
    UnknownArchitecture,
    UnknownLayer,
)
from .evaluation import TransferMatrix, cell_stream, select_eval_indices
from .feature_aug import default_hook_for
from .report import dumps_json, emit_report, xy_csv

log = logging.getLogger("faug")

EXIT_OK, EXIT_INVALID, EXIT_GOLDEN, EXIT_IO, EXIT_NUMERIC, EXIT_OTHER = 0, 1, 2, 3, 4, 5

_INVALID = (ConfigNotFound, ConfigInvalid, InvalidSpec, InvalidGrid, UnknownArchitecture, UnknownLayer,
            IncompatibleModels, NoEligibleSamples)
_IO = (CheckpointIOError, ReportIOError)
_NUMERIC = (DivergedTraining, DegenerateLogits, NonFiniteResult)


class UsageError(FaugError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="YAML config path, or 'default' for the bundled one")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides outputs.dir)")
    common.add_argument("--format", choices=("csv", "json"), help="report format (default: config outputs.formats)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes for independent cells")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")

    p = argparse.ArgumentParser(prog="faug", description="Feature-augmentation transfer attack laboratory.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the procedural dataset")
    t = sub.add_parser("train", parents=[common], help="train the configured models")
    t.add_argument("--model", action="append", help="train only this model id (repeatable)")
    a = sub.add_parser("attack", parents=[common], help="craft one adversarial batch")
    a.add_argument("--surrogate", help="surrogate model id (default: first zoo model)")
    a.add_argument("--variant", help="attack variant (overrides attack.variant)")
    a.add_argument("--faug", action="store_true", help="attack the surrogate through its feature hook")
    sub.add_parser("eval-matrix", parents=[common], help="plain and FAUG transfer matrices")
    sub.add_parser("ablate", parents=[common], help="run the configured ablation sweeps")
    sub.add_parser("diag-cosine", parents=[common], help="logit cosine diagnostic")
    sub.add_parser("sweep-musigma", parents=[common], help="hooked accuracy over a (mu, sigma) grid")
    r = sub.add_parser("repro", parents=[common], help="full pipeline, diffed against the committed goldens")
    r.add_argument("--update-goldens", action="store_true", help="write the regenerated summary as the new goldens")
    r.add_argument("--goldens", help="golden file to compare against (default: the bundled one)")
    return p


class _Ctx:
    def __init__(self, args):
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        self.args = args
        self.cfg = load_config(args.config, seed=args.seed)
        self.out = Path(args.out) if args.out else self.cfg.out_dir
        self.formats = [args.format] if args.format else list(self.cfg.outputs.get("formats", ["json"]))
        self.jobs = args.jobs
        self.meta = {"master_seed": self.cfg.seed, "config": self.cfg.resolved()}

    def dir(self, name: str) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def splits(self):
        return pipeline.make_data(self.cfg)

    def models(self, splits, ids=None):
        return pipeline.train_models(self.cfg, splits, jobs=self.jobs, ckpt_dir=self.dir("checkpoints"),
                                     reuse=True, ids=ids, log=log.info)

    def emit(self, stem: str, report, csv_ok: bool = True) -> list[Path]:
        paths = []
        for fmt in self.formats:
            if fmt == "csv" and not csv_ok:
                continue
            paths.append(emit_report(report, fmt, self.dir("reports") / f"{stem}.{fmt}", self.meta))
        return paths


def cmd_gen_data(ctx: _Ctx) -> int:
    splits = ctx.splits()
    d = ctx.dir("data")
    for part in splits:
        np.savez(d / f"{part.split}.npz", images=part.images, labels=part.labels,
                 meta=np.array(json.dumps(ctx.meta)))
    counts = {p.split: np.bincount(p.labels, minlength=ctx.cfg.dataset.classes).tolist() for p in splits}
    ctx.emit("dataset", {"fingerprint": pipeline.data_fingerprint(splits), "class_counts": counts}, csv_ok=False)
    return EXIT_OK


def cmd_train(ctx: _Ctx) -> int:
    ids = ctx.args.model
    known = {m.id for m in ctx.cfg.models}
    for mid in ids or []:
        if mid not in known:
            raise ConfigInvalid(f"unknown model id {mid!r}")
    models = ctx.models(ctx.splits(), ids)
    ctx.emit("training", pipeline.training_summary(models), csv_ok=False)
    return EXIT_OK


def cmd_attack(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    surrogate = ctx.args.surrogate or cfg.zoo[0].id
    if surrogate not in {m.id for m in cfg.models}:
        raise ConfigInvalid(f"unknown surrogate {surrogate!r}")
    attack = replace(cfg.attack, variant=ctx.args.variant) if ctx.args.variant else cfg.attack
    attack.validate()
    splits = ctx.splits()
    model = ctx.models(splits, [surrogate])[surrogate]
    hook = cfg.hooks.get(surrogate, default_hook_for(model.architecture)) if ctx.args.faug else None
    n_eval = int(cfg.sweeps.get("n_eval", 500))
    idx = select_eval_indices(len(splits.test.labels), n_eval, cfg.seed)
    adv = run_attack(ModelView.single(model, hook), splits.test.images[idx], splits.test.labels[idx], attack,
                     cell_stream(cfg.seed, "attack", surrogate), indices=idx)
    name = f"{surrogate}_{attack.variant}{'_faug' if hook else ''}_seed{cfg.seed}"
    save_adv_batch(adv, ctx.dir("adv") / name, extra=dict(ctx.meta))
    log.info("white-box success %.4f, max |delta| %.6f", adv.white_box_rate, adv.max_perturbation())
    return EXIT_OK


def cmd_eval_matrix(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    splits = ctx.splits()
    models = ctx.models(splits)
    n_eval = int(cfg.sweeps.get("n_eval", 500))
    for policy, m in pipeline.matrix_pair(cfg, models, splits, cfg.seed, cfg.attack, n_eval, ctx.jobs).items():
        ctx.emit(f"matrix_{cfg.attack.variant}_{policy}_seed{cfg.seed}", m)
        log.info("%s AVG: %s", policy, json.dumps({k: round(v, 4) for k, v in m.averages().items()}))
    return EXIT_OK


def _single_seed(ctx: _Ctx) -> None:
    ctx.cfg.sweeps = {**ctx.cfg.sweeps, "seeds": [ctx.cfg.seed]}


def cmd_ablate(ctx: _Ctx) -> int:
    _single_seed(ctx)
    splits = ctx.splits()
    results = pipeline.ablation_phase(ctx.cfg, ctx.models(splits), splits, ctx.jobs, log.info)
    for r in results:
        stem = f"ablation_{r['dimension']}_{r['surrogate']}_seed{ctx.cfg.seed}"
        ctx.emit(stem, r, csv_ok=False)
        res = r["seeds"][str(ctx.cfg.seed)]
        xs = [g if not isinstance(g, dict) else _hook_label(g) for g in res["grid"]]
        (ctx.dir("reports") / f"{stem}.xy.csv").write_text(xy_csv(zip(xs, res["averages"]), ctx.meta))
    return EXIT_OK


def _hook_label(h: dict) -> str:
    params = ",".join(f"{k}={v:g}" for k, v in h.items() if k not in ("layer", "kind"))
    return f"{h['layer']}:{h['kind']}({params})"


def cmd_diag_cosine(ctx: _Ctx) -> int:
    _single_seed(ctx)
    splits = ctx.splits()
    res = pipeline.cosine_phase(ctx.cfg, ctx.models(splits), splits, ctx.jobs, log.info)
    ctx.emit(f"cosine_seed{ctx.cfg.seed}", res, csv_ok=False)
    return EXIT_OK


def cmd_sweep_musigma(ctx: _Ctx) -> int:
    _single_seed(ctx)
    splits = ctx.splits()
    res = pipeline.musigma_phase(ctx.cfg, ctx.models(splits), splits, ctx.jobs, log.info)
    ctx.emit(f"musigma_seed{ctx.cfg.seed}", res, csv_ok=False)
    for mid, seeds in res.items():
        for sigma in sorted({row["sigma"] for row in seeds[str(ctx.cfg.seed)]}):
            pairs = [(row["mu"], row["accuracy"]) for row in seeds[str(ctx.cfg.seed)] if row["sigma"] == sigma]
            path = ctx.dir("reports") / f"musigma_{mid}_sigma{sigma:g}_seed{ctx.cfg.seed}.xy.csv"
            path.write_text(xy_csv(pairs, ctx.meta, header=("mu", "accuracy")))
    return EXIT_OK


def _emit_repro(ctx: _Ctx, summary: dict) -> None:
    reports = ctx.dir("reports")
    (reports / "repro.json").write_text(dumps_json(summary))
    for seed, pair in summary["transfer"].items():
        for policy, m in pair.items():
            emit_report(TransferMatrix.from_dict(m), "csv", reports / f"matrix_{policy}_seed{seed}.csv", ctx.meta)
    for abl in summary["ablations"]:
        for seed, res in abl["seeds"].items():
            xs = [g if not isinstance(g, dict) else _hook_label(g) for g in res["grid"]]
            path = reports / f"ablation_{abl['dimension']}_{abl['surrogate']}_seed{seed}.xy.csv"
            path.write_text(xy_csv(zip(xs, res["averages"]), ctx.meta))


def cmd_repro(ctx: _Ctx) -> int:
    timings = {}
    summary = pipeline.normalise(
        pipeline.run_all(ctx.cfg, jobs=ctx.jobs, ckpt_dir=ctx.dir("checkpoints"), log=log.info, timings=timings)
    )
    log.info("stage seconds: %s", json.dumps({k: round(v, 1) for k, v in timings.items()}))
    _emit_repro(ctx, summary)
    golden = Path(ctx.args.goldens) if ctx.args.goldens else pipeline.golden_path()
    if ctx.args.update_goldens:
        golden.parent.mkdir(parents=True, exist_ok=True)
        golden.write_text(dumps_json(summary))
        log.info("goldens written to %s", golden)
        return EXIT_OK
    expected = pipeline.load_goldens(golden)
    if expected is None:
        print(f"error: goldens not found: {golden}", file=sys.stderr)
        return EXIT_GOLDEN
    diffs = pipeline.diff_goldens(summary, expected)
    if diffs:
        shown = ", ".join(diffs[:5]) + (f" (+{len(diffs) - 5} more)" if len(diffs) > 5 else "")
        print(f"error: golden mismatch at {len(diffs)} paths: {shown}", file=sys.stderr)
        return EXIT_GOLDEN
    log.info("all goldens reproduced bitwise")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval-matrix": cmd_eval_matrix,
    "ablate": cmd_ablate,
    "diag-cosine": cmd_diag_cosine,
    "sweep-musigma": cmd_sweep_musigma,
    "repro": cmd_repro,
}


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](_Ctx(args))
    except (FaugError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return _exit_code(e)


def _exit_code(e: Exception) -> int:
    if isinstance(e, (UsageError, *_INVALID)):
        return EXIT_INVALID
    if isinstance(e, (*_IO, OSError)):
        return EXIT_IO
    if isinstance(e, _NUMERIC):
        return EXIT_NUMERIC
    return EXIT_OTHER


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
