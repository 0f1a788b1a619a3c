"""Command-line entry point.

    pftlab gen-data     write the synthetic 5-corpus suite
    pftlab prefinetune  train one checkpoint per power-set config
    pftlab finetune     run a single downstream trial (debugging)
    pftlab grid plan    write the trial plan and print its size
    pftlab grid run     execute the plan into the results store
    pftlab grid report  aggregate the store into CSV / markdown reports
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import analysis
from .config import ConfigError, RunConfig, load_config
from .data import DOWNSTREAM_NAME, generate_suite, load_corpus, read_manifest, save_corpus
from .experiments import (GridPlan, PrefinetuneConfig, ResultsStore, TrialSettings, TrialSpec,
                          enumerate_powerset, plan_grid, run_grid, run_trial)
from .kernel import config_hash, load_checkpoint, read_checkpoint_header, save_checkpoint
from .sampling import trial_seed
from .training import PrefinetuneSpec, prefinetune

log = logging.getLogger("pftlab")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- layout


def data_dir(cfg: RunConfig) -> Path:
    return cfg.out / "data"


def ckpt_dir(cfg: RunConfig) -> Path:
    return cfg.out / "checkpoints"


def grid_dir(cfg: RunConfig) -> Path:
    return cfg.out / "grid"


def report_dir(cfg: RunConfig) -> Path:
    return cfg.out / "reports"


def _corpus_names(cfg: RunConfig) -> list[str]:
    return [t.name for t in cfg.synth.corpora]


def _require_data(cfg: RunConfig) -> None:
    missing = [n for n in _corpus_names(cfg) + [DOWNSTREAM_NAME] if not (data_dir(cfg) / n / "manifest").exists()]
    if missing:
        raise CommandError(f"missing corpora {missing} under {data_dir(cfg)}; run gen-data first")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, force: bool = False) -> list[dict]:
    out = data_dir(cfg)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CommandError(f"{out} is not empty; pass --force to regenerate")
        shutil.rmtree(out)
    corpora, downstream = generate_suite(cfg.synth)
    summaries = []
    for c in corpora + [downstream]:
        save_corpus(c, out / c.name)
        summaries.append(c.summary())
    (out / "synth.json").write_text(json.dumps(cfg.synth.to_dict(), indent=1, default=list) + "\n")
    return summaries


def _pft_spec(cfg: RunConfig, pc: PrefinetuneConfig) -> PrefinetuneSpec:
    m = cfg.model
    return PrefinetuneSpec(pc.corpora, pc.config_id, m.pft_max_epochs, m.pft_patience, m.pft_lr,
                           m.pft_momentum, m.pft_batch_size, m.hidden_dim, cfg.seed)


def _pft_identity(cfg: RunConfig, pc: PrefinetuneConfig) -> dict:
    """What a checkpoint depends on; its hash goes in the checkpoint header."""
    return {"synth": cfg.to_dict()["synth"], "seed": cfg.seed, "model": cfg.to_dict()["model"],
            "corpora": list(pc.corpora), "config_id": pc.config_id}


def _train_one(cfg: RunConfig, pc: PrefinetuneConfig, path: Path) -> dict:
    corpora = [load_corpus(data_dir(cfg) / n) for n in _corpus_names(cfg)]
    model, state = prefinetune(_pft_spec(cfg, pc), corpora)
    save_checkpoint(model, path, seed=cfg.seed, config=_pft_identity(cfg, pc))
    return {"config_id": pc.config_id, "epochs": state.epochs_run, "best_epoch": state.best_epoch,
            "best_validation_loss": None if not state.curve else state.best_validation_loss}


def _checkpoint_current(cfg, pc, path: Path) -> bool:
    if not path.exists():
        return False
    try:
        return read_checkpoint_header(path)["config_hash"] == config_hash(_pft_identity(cfg, pc))
    except (ValueError, KeyError, OSError):
        return False


def cmd_prefinetune(cfg: RunConfig) -> dict:
    _require_data(cfg)
    out = ckpt_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    configs = enumerate_powerset(_corpus_names(cfg))
    paths = {pc.config_id: out / f"config_{pc.config_id:02d}.ckpt" for pc in configs}
    todo = [pc for pc in configs if not _checkpoint_current(cfg, pc, paths[pc.config_id])]
    log.info("%d of %d checkpoints to train", len(todo), len(configs))
    if cfg.parallelism > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.parallelism) as pool:
            results = list(pool.map(_train_one, [cfg] * len(todo), todo, [paths[pc.config_id] for pc in todo]))
    else:
        results = [_train_one(cfg, pc, paths[pc.config_id]) for pc in todo]
    manifest = {
        "config_hash": cfg.hash,
        "configs": [{"config_id": pc.config_id, "corpora": list(pc.corpora),
                     "checkpoint": paths[pc.config_id].name} for pc in configs],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return {"trained": results, "skipped": len(configs) - len(todo), "manifest": manifest}


def load_checkpoint_manifest(cfg: RunConfig) -> tuple[dict[int, tuple[str, ...]], dict[int, Path]]:
    path = ckpt_dir(cfg) / "manifest.json"
    if not path.exists():
        raise CommandError(f"missing {path}; run prefinetune first")
    manifest = json.loads(path.read_text())
    configs = {c["config_id"]: tuple(c["corpora"]) for c in manifest["configs"]}
    paths = {c["config_id"]: ckpt_dir(cfg) / c["checkpoint"] for c in manifest["configs"]}
    return configs, paths


def _grid_axes(cfg: RunConfig) -> tuple[list[str], list[str]]:
    manifest = read_manifest(data_dir(cfg) / DOWNSTREAM_NAME)
    speakers = sorted({row[0] for row in manifest["rows"]})
    emotions = list(manifest["labels"])
    g = cfg.grid
    if g.speakers is not None:
        unknown = sorted(set(g.speakers) - set(speakers))
        if unknown:
            raise CommandError(f"grid.speakers not in downstream corpus: {unknown}")
        speakers = list(g.speakers)
    if g.emotions is not None:
        unknown = sorted(set(g.emotions) - set(emotions))
        if unknown:
            raise CommandError(f"grid.emotions not in downstream corpus: {unknown}")
        emotions = list(g.emotions)
    return speakers, emotions


def make_plan(cfg: RunConfig) -> GridPlan:
    _require_data(cfg)
    speakers, emotions = _grid_axes(cfg)
    configs = enumerate_powerset(_corpus_names(cfg))
    return plan_grid(configs, speakers, emotions, cfg.grid.ks, cfg.grid.trials, cfg.seed)


def cmd_grid_plan(cfg: RunConfig) -> tuple[GridPlan, Path]:
    plan = make_plan(cfg)
    path = grid_dir(cfg) / "plan.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    plan.save(path)
    return plan, path


def _settings(cfg: RunConfig) -> TrialSettings:
    m = cfg.model
    return TrialSettings(m.ft_max_epochs, m.ft_patience, m.ft_lr, m.ft_momentum)


def cmd_grid_run(cfg: RunConfig, max_trials: int | None = None, progress=None) -> ResultsStore:
    plan = make_plan(cfg)
    plan_path = grid_dir(cfg) / "plan.jsonl"
    if plan_path.exists():
        saved = GridPlan.load(plan_path)
        if saved.plan_hash != plan.plan_hash:
            raise CommandError(f"plan file {plan_path} ({saved.plan_hash}) does not match "
                               f"the current config ({plan.plan_hash}); re-run grid plan")
    else:
        plan_path.parent.mkdir(parents=True, exist_ok=True)
        plan.save(plan_path)
    _, paths = load_checkpoint_manifest(cfg)
    try:
        return run_grid(plan, paths, data_dir(cfg) / DOWNSTREAM_NAME, grid_dir(cfg) / "store.jsonl",
                        cfg.parallelism, _settings(cfg), max_trials, progress)
    except ValueError as exc:
        raise CommandError(str(exc)) from None


def cmd_grid_report(cfg: RunConfig) -> dict[str, Path]:
    store_path = grid_dir(cfg) / "store.jsonl"
    store = ResultsStore(store_path) if store_path.exists() else None
    records = store.ok_records() if store else []
    if not records:
        raise CommandError("no ok records")
    configs, _ = load_checkpoint_manifest(cfg)
    downstream = read_manifest(data_dir(cfg) / DOWNSTREAM_NAME)
    speaker_language = {row[0]: row[1] for row in downstream["rows"]}
    tables = {
        "curves": analysis.n_corpora_curves(records, configs),
        "contributions": analysis.corpus_contributions(records, configs),
        "incl_excl": analysis.inclusion_exclusion(records, configs),
        "stratified": analysis.stratified_curves(records, configs, speaker_language, _grid_axes(cfg)[1]),
    }
    out = report_dir(cfg)
    written = {}
    for name, rows in tables.items():
        if not rows:
            log.warning("report %s is empty; skipped", name)
            continue
        written[f"{name}.csv"] = analysis.emit_report(rows, out / f"{name}.csv", "csv")
        written[f"{name}.md"] = analysis.emit_report(rows, out / f"{name}.md", "markdown")
    if store.failed:
        failed = [r.to_dict() for r in store.failed.values()]
        p = out / "failed.json"
        p.write_text(json.dumps(failed, indent=1) + "\n")
        written["failed.json"] = p
    return written


def cmd_finetune(cfg: RunConfig, config_id: int, speaker: str, emotion: str, k: int, trial_index: int) -> dict:
    _, paths = load_checkpoint_manifest(cfg)
    if config_id not in paths:
        raise CommandError(f"unknown config id {config_id}")
    downstream = load_corpus(data_dir(cfg) / DOWNSTREAM_NAME)
    spec = TrialSpec(config_id, speaker, emotion, k, trial_index,
                     trial_seed(cfg.seed, config_id, speaker, emotion, k, trial_index))
    try:
        rec = run_trial(spec, load_checkpoint(paths[config_id]), downstream, _settings(cfg), cfg.seed)
    except (KeyError, ValueError) as exc:
        raise CommandError(str(exc)) from None
    return rec.to_dict()


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="JSON run config")
    common.add_argument("--out", help="output directory (default: $PFTLAB_OUTPUT or runs/default)")
    common.add_argument("--seed", type=int)
    common.add_argument("--parallelism", "-j", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. synth.transfer_strength=0.5")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pftlab", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus suite")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty data directory")
    sub.add_parser("prefinetune", parents=[common], help="train one checkpoint per corpus subset")
    f = sub.add_parser("finetune", parents=[common], help="run one downstream trial")
    f.add_argument("--config-id", type=int, required=True)
    f.add_argument("--speaker", required=True)
    f.add_argument("--emotion", required=True)
    f.add_argument("--k", type=int, required=True)
    f.add_argument("--trial", type=int, default=0)
    grid = sub.add_parser("grid", help="plan / run / report the trial grid")
    gsub = grid.add_subparsers(dest="grid_command", required=True)
    for name in ("plan", "run", "report"):
        gp = gsub.add_parser(name, parents=[common])
        gp.add_argument("--ks", help="comma-separated few-shot sizes")
        gp.add_argument("--trials", type=int)
        gp.add_argument("--speakers", help="comma-separated speaker ids")
        gp.add_argument("--emotions", help="comma-separated emotions")
        if name == "run":
            gp.add_argument("--max-trials", type=int, help="stop after this many new trials")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.parallelism is not None:
        overrides.append(f"parallelism={args.parallelism}")
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    if getattr(args, "ks", None):
        overrides.append(f"grid.ks={json.dumps([int(k) for k in args.ks.split(',')])}")
    if getattr(args, "trials", None) is not None:
        overrides.append(f"grid.trials={args.trials}")
    if getattr(args, "speakers", None):
        overrides.append(f"grid.speakers={json.dumps(args.speakers.split(','))}")
    if getattr(args, "emotions", None):
        overrides.append(f"grid.emotions={json.dumps(args.emotions.split(','))}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        print(f"config hash: {cfg.hash}")
        t0 = time.perf_counter()
        if args.command == "gen-data":
            for s in cmd_gen_data(cfg, args.force):
                print(f"{s['name']:<12} labels={len(s['labels'])} speakers={s['speakers']} "
                      f"utterances={s['utterances']} train={s['train']} validation={s['validation']} "
                      f"test={s['test']}")
            print(f"wrote {data_dir(cfg)}")
        elif args.command == "prefinetune":
            res = cmd_prefinetune(cfg)
            for r in res["trained"]:
                print(f"config {r['config_id']:>2}: {r['epochs']} epochs, best epoch {r['best_epoch']}")
            print(f"checkpoints: {len(res['manifest']['configs'])} ({res['skipped']} already current)")
            print(f"wrote {ckpt_dir(cfg)}")
        elif args.command == "finetune":
            print(json.dumps(cmd_finetune(cfg, args.config_id, args.speaker, args.emotion, args.k, args.trial)))
        elif args.grid_command == "plan":
            plan, path = cmd_grid_plan(cfg)
            print(len(plan))
            print(f"plan hash: {plan.plan_hash}")
            print(f"wrote {path}")
        elif args.grid_command == "run":
            def progress(i, n):
                if i % 100 == 0 or i == n:
                    print(f"  {i}/{n} trials", flush=True)
            store = cmd_grid_run(cfg, args.max_trials, progress)
            print(f"store: {len(store.records)} ok, {len(store.failed)} failed")
            print(f"wrote {store.path}")
        elif args.grid_command == "report":
            for path in cmd_grid_report(cfg).values():
                print(f"wrote {path}")
        log.debug("done in %.1fs", time.perf_counter() - t0)
    except (CommandError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
