"""Command line entry point: ``longtail <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 partial run or runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import budgetnas, config, metaengine, nets, persist, pipeline
from .synthgen import generate_scenarios

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("longtail")


def _load_cfg(args) -> pipeline.ExperimentConfig:
    cfg = config.load_config(args.config) if args.config else config.from_dict({})
    if getattr(args, "flops_budget", None) is not None:
        try:
            cfg = replace(cfg, nas=replace(cfg.nas, flops_budget=args.flops_budget))
            cfg.validate()
        except ValueError as exc:
            raise config.ConfigError("--flops-budget", str(exc).partition(": ")[2] or str(exc)) from exc
    return cfg


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _scenarios(args, cfg, seed):
    if getattr(args, "data", None):
        return persist.load_universe(args.data)
    return generate_scenarios(cfg.universe, seed)


def _pick(scenarios, sid):
    for ds in scenarios:
        if ds.scenario_id == sid:
            return ds
    raise config.ConfigError("--scenario", f"no scenario {sid}; have {[d.scenario_id for d in scenarios]}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_datagen(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    scenarios = generate_scenarios(cfg.universe, seed)
    persist.save_universe(scenarios, args.out, cfg.universe, seed)
    for ds in scenarios:
        print(f"scenario {ds.scenario_id}: {ds.counts()} label mean {ds.labels.mean():.3f}")
    return EXIT_OK


def cmd_init_agnostic(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    out = Path(args.out)
    init = cfg.init
    if args.hpo_trials is not None:
        init = replace(init, hpo_trials=args.hpo_trials)
    if init.hpo_trials > 0:
        init = replace(init, hpo_history_path=str(out / "hpo_history.jsonl"))
    cfg = replace(cfg, init=init)
    scenarios = _scenarios(args, cfg, seed)
    state, cands, ids = pipeline.make_meta_state(cfg, scenarios, seed)
    persist.save_meta_state(state, out / "meta_state")
    summary = {
        "initial_scenarios": ids,
        "candidates": [{"name": c.name, "val_auc": c.val_auc, "flops": c.flops, "info": c.info} for c in cands],
        "selected": metaengine.select_candidate(cands).name,
    }
    _write_json(out / "init.json", summary)
    for c in cands:
        print(f"{c.name:<12} val AUC {c.val_auc:.4f}  FLOPs {c.flops}")
    print(f"selected {summary['selected']}; meta state written to {out / 'meta_state'}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    report = pipeline.run_experiment(cfg, args.out)
    print(report.render_table())
    return EXIT_PARTIAL if report.partial else EXIT_OK


def cmd_search_light(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    out = Path(args.out)
    ds = _pick(_scenarios(args, cfg, seed), args.scenario)
    if args.teacher:
        teacher = persist.load_artifact(args.teacher)
    elif args.meta_state:
        teacher, _ = metaengine.fine_tune(persist.load_meta_state(args.meta_state), ds, seed=seed + ds.scenario_id)
    else:
        teacher = None
    nas = replace(cfg.nas, flops_budget=cfg.flops_budget(), seed=seed)
    if teacher is None:
        nas = replace(nas, delta=0.0)
    g, art, _ = budgetnas.search_light(
        ds, teacher, cfg.arch_for(cfg.light), nas, replace(cfg.light_train, seed=seed), cfg.space(),
        {"strategy": "Ours", "scenario_id": ds.scenario_id},
    )
    persist.save_artifact(art, out / "artifact")
    (out / "genotype.txt").write_text(g.describe() + "\n")
    fl = art.flops()
    result = {"scenario_id": ds.scenario_id, "auc": nets.evaluate_auc(art, ds), "flops": fl, "budget": nas.flops_budget, "genotype": g.to_dict()}
    _write_json(out / "search.json", result)
    print(g.describe())
    print(f"encoder FLOPs {fl['encoder']} (budget {nas.flops_budget}), test AUC {result['auc']:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    art = persist.load_artifact(args.artifact)
    scenarios = _scenarios(args, cfg, seed)
    if args.scenario is not None:
        scenarios = [_pick(scenarios, args.scenario)]
    rows = []
    for ds in scenarios:
        fl = art.flops()
        rows.append({"scenario_id": ds.scenario_id, "auc": nets.evaluate_auc(art, ds), "flops": fl["total"], "encoder_flops": fl["encoder"], "n_params": art.n_params()})
        print(f"scenario {ds.scenario_id}: AUC {rows[-1]['auc']:.4f}  FLOPs {fl['total']}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "evaluation.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    art = persist.load_artifact(args.artifact)
    ds = _pick(_scenarios(args, cfg, seed), args.scenario)
    reps = args.reps if args.reps is not None else cfg.serve.reps
    size = args.batch_size if args.batch_size is not None else cfg.serve.batch_size
    if reps < 3:
        raise config.ConfigError("--reps", "must be >= 3")
    preds, lat = pipeline.serve_batch(art, pipeline.request_batch(ds.part("test"), size), reps)
    result = {"scenario_id": ds.scenario_id, "batch_size": size, "reps": reps, "mean_ms": lat.mean_ms, "p95_ms": lat.p95_ms, "samples_ms": list(lat.samples_ms)}
    _write_json(Path(args.out) / "latency.json", result)
    print(f"{size} requests x {reps} reps: mean {lat.mean_ms:.3f} ms, p95 {lat.p95_ms:.3f} ms")
    return EXIT_OK


def cmd_report(args) -> int:
    report = pipeline.StrategyReport.read_jsonl(args.report)
    text = report.render_table()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longtail", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="overrides the first seed of the config")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("datagen", cmd_datagen, "generate and save a scenario universe")

    p = add("init-agnostic", cmd_init_agnostic, "build the shared heavy model from the initial scenarios")
    p.add_argument("--data", help="saved universe directory (generated from the config when omitted)")
    p.add_argument("--hpo-trials", type=int, help="tune the hand-designed model with this many trials")

    p = add("run", cmd_run, "run every configured strategy and write the report")
    p.add_argument("--flops-budget", type=int, help="encoder FLOPs bound for searched models")

    p = add("search-light", cmd_search_light, "search and train a budgeted light model for one scenario")
    p.add_argument("--data")
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--teacher", help="saved teacher artifact")
    p.add_argument("--meta-state", help="saved meta state; its fine-tuned model becomes the teacher")
    p.add_argument("--flops-budget", type=int)

    p = add("evaluate", cmd_evaluate, "test AUC and FLOPs of a saved artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--data")
    p.add_argument("--scenario", type=int)

    p = add("serve", cmd_serve, "time batched predictions of a saved artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--data")
    p.add_argument("--scenario", type=int, default=0)
    p.add_argument("--reps", type=int)
    p.add_argument("--batch-size", type=int)

    p = add("report", cmd_report, "render a saved report.jsonl as a table")
    p.add_argument("--report", required=True, help="report.jsonl from a previous run")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, persist.FormatError, persist.ChecksumError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
