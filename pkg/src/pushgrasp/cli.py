"""Command-line entry point: ``pushgrasp {train,evaluate,replay,render,grad-check}``."""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import gradcheck
from .checkpoint import CheckpointError
from .config import Config, ConfigError, compressed
from .evalbench import (
    aggregate,
    evaluate,
    format_comparison,
    format_table,
    load_protocols,
    protocol,
)
from .perception import dump_stack, occluded_rate, render
from .plots import plot_eval, plot_training_curve
from .rewards import ThresholdState, grasp_reward, push_reward
from .sim import MotionPrimitive, Scene, apply_grasp, apply_push
from .tensor import DivergenceError
from .trainer import PolicySnapshot, Trainer

log = logging.getLogger("pushgrasp")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED, EXIT_DRIFT = 0, 1, 2, 3, 4
METRIC_FIELDS = ("iter", "rolling_success_100", "rolling_attempts_100", "mean_loss", "t_g", "epsilon")


class CliError(RuntimeError):
    pass


def _plain(value):
    """Make numpy scalars JSON-serialisable without changing their value."""
    if isinstance(value, (bool, int, str)) or value is None:
        return value
    if hasattr(value, "item"):
        return value.item()
    return value


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def build_config(args: argparse.Namespace) -> Config:
    if getattr(args, "config", None):
        config = Config.load(args.config)
    elif getattr(args, "preset", "default") == "compressed":
        config = compressed()
    else:
        config = Config()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


# -- train ----------------------------------------------------------------


def cmd_train(config: Config, max_iter: int, out_dir: str | Path, resume: str | Path | None = None) -> int:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "scenes").mkdir(exist_ok=True)
    meta = {"command": "train", "started": _now(), "max_iter": max_iter}
    trainer = Trainer.load_checkpoint(resume) if resume else Trainer(config)

    def save_scene(trial: int, scene: Scene, target: int) -> None:
        data = {"trial": trial, "target_id": target, **scene.to_dict()}
        (out / "scenes" / f"trial_{trial:05d}.json").write_text(json.dumps(data) + "\n")

    trainer.on_trial_start.append(save_scene)
    if trainer.scene is not None and trainer.target is not None:
        save_scene(trainer.trial, trainer.scene, trainer.target)
    cfg = trainer.config
    metrics: list[dict] = []
    code = EXIT_OK
    with open(out / "trials.jsonl", "w") as trials, open(out / "metrics.csv", "w", newline="") as mfh:
        writer = csv.DictWriter(mfh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for _ in range(max_iter):
            try:
                row = trainer.step()
            except DivergenceError as exc:
                diag = out / "checkpoints" / "diverged.opgw"
                trainer.save_checkpoint(diag)
                log.error("training diverged at iteration %d: %s (state saved to %s)", trainer.iteration, exc, diag)
                code = EXIT_DIVERGED
                break
            trials.write(json.dumps({k: _plain(v) for k, v in row.items()}) + "\n")
            if trainer.iteration % cfg.metrics_every == 0:
                m = {**trainer.metrics_row(), "t_g": trainer.threshold.t_g, "epsilon": trainer.epsilon}
                metrics.append(m)
                writer.writerow(m)
                log.info("iter %d success %.3f attempts %.2f", m["iter"], m["rolling_success_100"], m["rolling_attempts_100"])
            if trainer.iteration % cfg.checkpoint_every == 0:
                trainer.save_checkpoint(out / "checkpoints" / f"iter_{trainer.iteration:06d}.opgw")
    if code == EXIT_OK:
        trainer.save_checkpoint(out / "checkpoints" / "final.opgw")
    if metrics:
        plot_training_curve(metrics, out / "training_curve.png")
    meta["finished"] = _now()
    meta["iterations_done"] = trainer.iteration
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return code


# -- evaluate ---------------------------------------------------------------


def cmd_evaluate(
    checkpoint: str | Path,
    protocols: list,
    out_dir: str | Path,
    no_coordinator: bool = False,
    ablation: bool = False,
    workers: int = 1,
) -> int:
    snapshot = PolicySnapshot.load(checkpoint)  # fails before anything is written
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    variants = [("coordinator", True), ("no_coordinator", False)] if ablation else [
        ("no_coordinator" if no_coordinator else "coordinator", not no_coordinator)
    ]
    tables: dict[str, list[dict]] = {}
    successes_only = snapshot.config.attempts_successes_only
    for label, use_coord in variants:
        records = evaluate(snapshot, protocols, use_coordinator=use_coord, workers=workers)
        suffix = f"_{label}" if ablation else ""
        with open(out / f"trials{suffix}.jsonl", "w") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
        rows = aggregate(records, successes_only)
        (out / f"metrics{suffix}.csv").write_text(format_table(rows))
        tables[label] = rows
    if ablation:
        (out / "comparison.csv").write_text(format_comparison(tables))
    plot_eval(tables, out / "eval.png")
    sys.stdout.write(format_comparison(tables))
    meta = {"command": "evaluate", "checkpoint": str(checkpoint), "started": started, "finished": _now()}
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return EXIT_OK


# -- replay / render ----------------------------------------------------------


def _load_scene_file(path: str | Path) -> tuple[Scene, dict]:
    data = json.loads(Path(path).read_text())
    return Scene.from_dict(data), data


def cmd_replay(trial_jsonl: str | Path, scene_json: str | Path, out_dir: str | Path, config: Config | None = None) -> int:
    """Re-execute the logged motions of one trial and demand identical outcomes."""
    cfg = config or Config()
    scene, data = _load_scene_file(scene_json)
    trial = data.get("trial")
    target = int(data["target_id"])
    rows = [json.loads(line) for line in Path(trial_jsonl).read_text().splitlines() if line.strip()]
    if trial is not None:
        rows = [r for r in rows if r.get("trial") == trial]
    if not rows:
        raise CliError(f"no logged motions for trial {trial} in {trial_jsonl}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"trial": trial, "steps": len(rows), "drift": None}
    for row in rows:
        prim = MotionPrimitive(row["kind"], int(row["x"]), int(row["y"]), int(row["rot"]))
        o_before = occluded_rate(scene, target)
        if prim.kind == "push":
            scene, _ = apply_push(scene, prim)
            terminal = False
            o_after = occluded_rate(scene, target)
            reward = push_reward(o_before, o_after, row["q_g_next"], ThresholdState(row["t_g"], cfg.beta), cfg.occlusion_drop)
        else:
            amodal = scene.footprint(target)
            scene, outcome = apply_grasp(scene, prim, target)
            terminal = outcome.target_was_grasped
            reward = grasp_reward(outcome, (prim.x, prim.y), amodal)
            o_after = None if terminal else occluded_rate(scene, target)
        got = {"reward": reward, "terminal": terminal, "o_before": o_before, "o_after": o_after}
        for key, value in got.items():
            if row.get(key) != value:
                report["drift"] = {"step": row["step"], "field": key, "logged": row.get(key), "replayed": value}
                break
        if report["drift"]:
            break
    (out / "replay_report.json").write_text(json.dumps(report, indent=1) + "\n")
    if report["drift"]:
        d = report["drift"]
        log.error("outcome drift at step %s: %s logged %r, replayed %r", d["step"], d["field"], d["logged"], d["replayed"])
        return EXIT_DRIFT
    if target in scene:
        dump_stack(render(scene, target), out, trial if trial is not None else "replay", len(rows))
    return EXIT_OK


def cmd_render(scene_json: str | Path, target_id: int, out_dir: str | Path) -> int:
    scene, data = _load_scene_file(scene_json)
    if target_id not in scene:
        raise CliError(f"object {target_id} is not in the scene")
    dump_stack(render(scene, target_id), Path(out_dir), data.get("trial", "scene"), data.get("step", 0))
    return EXIT_OK


def cmd_grad_check(seed: int = 0) -> int:
    checks = (
        ("linear layers", gradcheck.check_linear_layers(seed), 1e-6),
        ("coordinator", gradcheck.check_coordinator(seed), 1e-3),
        ("q-network", gradcheck.check_qnet(seed=seed), 1e-3),
    )
    ok = True
    for name, report, tol in checks:
        passed = report.ok(tol)
        ok &= passed
        print(f"{name}: max relative error {report.max_rel_error:.3e} over {report.n_checked} entries "
              f"(tolerance {tol:g}) {'PASS' if passed else 'FAIL'}")  # fmt: skip
    return EXIT_OK if ok else EXIT_ERROR


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of config overrides")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pushgrasp", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run the curriculum trainer")
    p.add_argument("--max-iter", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", choices=("default", "compressed"), default="default",
                   help="base config when --config is not given")  # fmt: skip
    p.add_argument("--resume", help="continue from a training checkpoint")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on test protocols")
    p.add_argument("checkpoint")
    p.add_argument("--protocol-file", help="JSON protocol definition(s)")
    p.add_argument("--protocol", action="append", default=[], help="protocol name, repeatable")
    p.add_argument("--trials", type=int, help="override the trial count of every protocol")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-coordinator", action="store_true", help="choose the kind by best Q value alone")
    p.add_argument("--ablation", action="store_true", help="run with and without the coordinator")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("replay", parents=[common], help="re-execute one logged trial and check for drift")
    p.add_argument("trial_jsonl")
    p.add_argument("scene_json")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("render", parents=[common], help="dump the heightmap rasters of a scene")
    p.add_argument("scene_json")
    p.add_argument("target_id", type=int)
    p.add_argument("--out-dir", required=True)

    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = build_config(args)
    except (ConfigError, OSError) as exc:
        print(f"pushgrasp: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "train":
            if args.max_iter < 0:
                raise CliError("--max-iter must be >= 0")
            return cmd_train(config, args.max_iter, args.out_dir, args.resume)
        if args.command == "evaluate":
            protos = load_protocols(args.protocol_file) if args.protocol_file else []
            protos += [protocol(name, seed_base=config.eval_seed_base) for name in args.protocol]
            if not protos:
                raise CliError("give --protocol-file or at least one --protocol")
            if args.trials is not None:
                protos = [replace(p, n_trials=args.trials) for p in protos]
            return cmd_evaluate(args.checkpoint, protos, args.out_dir, args.no_coordinator, args.ablation, args.workers)
        if args.command == "replay":
            return cmd_replay(args.trial_jsonl, args.scene_json, args.out_dir, config)
        if args.command == "render":
            return cmd_render(args.scene_json, args.target_id, args.out_dir)
        if args.command == "grad-check":
            return cmd_grad_check(args.seed or 0)
    except (CheckpointError, CliError, ValueError, KeyError, OSError) as exc:
        print(f"pushgrasp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
