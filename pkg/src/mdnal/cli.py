"""Command-line entry point: ``mdnal <subcommand> --config c.ini --out dir``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import acquisition as acq
from . import harness as H
from .autodiff import load_params, save_params
from .evaluation import evaluate_map, map_from_files
from .gradcheck import LOSSES, run_suite
from .losses import train, write_loss_curve
from .scenes import generate_dataset, save_dataset
from .uncertainty import detection_uncertainties, write_uncertainty_csv
from .detector import detect, init_params

log = logging.getLogger("mdnal")


class ConfigError(Exception):
    pass


def _config(args) -> H.ExperimentConfig:
    try:
        cfg = H.load_config(args.config) if args.config else H.ExperimentConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = cfg.dataset if args.seed is None else dataclasses.replace(cfg.dataset, seed=args.seed)
    spec.validate()
    save_dataset(_out(args), spec, generate_dataset(spec))
    print(f"wrote {spec.n_scenes} scenes to {args.out}")
    return 0


def _seed(cfg) -> int:
    return cfg.seeds[0]


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    H.dump_config(cfg, out / "config.ini")
    data = H.PoolData.build(cfg)
    s = _seed(cfg)
    labeled = sorted(data.train) if args.all else H.initial_state(cfg, data, s).labeled
    seed = H.cycle_seed(s, 1)
    res = train(init_params(cfg.network, seed), data.scenes(labeled), cfg.network, cfg.optimizer, seed)
    save_params(out / "model.ckpt", res.params)
    write_loss_curve(out / "loss.csv", res.curve)
    m = evaluate_map(res.params, cfg.network, data.test)
    H._write_rows(out / "metrics.csv", ("seed", "labeled_count", "mAP50", "mAP75"),
                  [(s, len(labeled), H._f(m[0.5]), H._f(m[0.75]))])
    print(f"mAP50 {m[0.5]:.4f} mAP75 {m[0.75]:.4f} ({len(labeled)} labeled)")
    return 0


def cmd_score(args) -> int:
    cfg = _config(args)
    out = _out(args)
    data = H.PoolData.build(cfg)
    state = H.initial_state(cfg, data, _seed(cfg))
    params = load_params(args.checkpoint)
    scenes = data.scenes(state.unlabeled)
    per_image, quads = {}, []
    for sc, (dets, gmm, _) in zip(scenes, detect(params, cfg.network, scenes)):
        dets = detection_uncertainties(gmm, dets, cfg.uncertainty_reduce)
        per_image[sc.id] = dets
        quads.append([d.uncertainties.as_array() for d in dets])
    write_uncertainty_csv(out / "uncertainties.csv", per_image)
    scores = acq.score_pool(state.unlabeled, quads, cfg.mode)
    chosen = acq.select_top_k(scores.ids, scores.final, cfg.budget, scores.has_detection)
    scores.write_csv(out / "scores.csv", chosen)
    print(f"scored {len(scenes)} pool images with {cfg.mode.label}; selected {len(chosen)}")
    return 0


def cmd_al_run(args) -> int:
    cfg = _config(args)
    rep = H.run_experiment(cfg, _out(args))
    for row in rep.summary:
        print(f"cycle {row[0]} labeled {row[1]}: mAP50 {row[3]:.4f} +- {row[4]:.4f}")
    return 0 if rep.complete else 1


def cmd_compare_agg(args) -> int:
    cfg = _config(args)
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else None
    reps = H.compare_aggregations(cfg, _out(args), modes=modes, include_random=not args.no_random)
    for label, rep in reps.items():
        print(f"{label:8s} " + " ".join(f"{r[3]:.4f}" for r in rep.summary))
    return 0 if all(r.complete for r in reps.values()) else 1


def cmd_overlap(args) -> int:
    cfg = _config(args)
    names, M, _ = H.overlap_analysis(cfg, _out(args))
    print("       " + " ".join(f"{n:>6s}" for n in names))
    for n, row in zip(names, M):
        print(f"{n:6s} " + " ".join(f"{v:6.1f}" for v in row))
    return 0


def cmd_eval(args) -> int:
    if args.predictions or args.ground_truth:
        if not (args.predictions and args.ground_truth):
            raise ConfigError("--predictions and --ground-truth go together")
        res = map_from_files(args.predictions, args.ground_truth, args.n_classes)
    elif args.checkpoint:
        cfg = _config(args)
        res = evaluate_map(load_params(args.checkpoint), cfg.network, H.PoolData.build(cfg).test)
    else:
        raise ConfigError("eval needs --checkpoint or --predictions/--ground-truth")
    if args.out:
        H._write_rows(_out(args) / "eval.csv", ("iou_threshold", "mAP"), [(t, H._f(v)) for t, v in res.items()])
    for t, v in res.items():
        print(f"mAP@{t} {v:.6f}")
    return 0


def cmd_grad_check(args) -> int:
    worst = run_suite(args.instances, args.seed or 0, args.tolerance)
    ok = True
    for name in LOSSES:
        good = worst[name] < args.tolerance
        ok &= good
        print(f"{name:26s} max_rel_err {worst[name]:.3e} {'ok' if good else 'FAIL'}")
    if args.out:
        H._write_rows(_out(args) / "grad_check.csv", ("loss", "max_rel_err"),
                      [(n, H._f(worst[n])) for n in LOSSES])
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdnal", description="Mixture-density active learning for detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_out=True):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI config file; defaults are used when omitted")
        sp.add_argument("--out", required=needs_out, help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the configured seeds with a single seed")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data)
    add("train", cmd_train).add_argument("--all", action="store_true", help="train on the whole train pool")
    add("score", cmd_score).add_argument("--checkpoint", required=True)
    add("al-run", cmd_al_run)
    ca = add("compare-agg", cmd_compare_agg)
    ca.add_argument("--modes", help="comma-separated subset of aggregation modes")
    ca.add_argument("--no-random", action="store_true")
    add("overlap", cmd_overlap)
    ev = add("eval", cmd_eval, needs_out=False)
    ev.add_argument("--checkpoint")
    ev.add_argument("--predictions")
    ev.add_argument("--ground-truth")
    ev.add_argument("--n-classes", type=int)
    gc = add("grad-check", cmd_grad_check, needs_out=False)
    gc.add_argument("--instances", type=int, default=50)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    return p


def _diagnose(command, kind: str, exc: BaseException) -> None:
    print(json.dumps({"command": command, "error": kind, "type": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        _diagnose(args.command, "config", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - report every failure as a diagnostic line
        log.debug("failure", exc_info=True)
        _diagnose(args.command, "runtime", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
