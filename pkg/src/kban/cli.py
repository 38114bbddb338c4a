"""Command-line entry point.

Subcommands: generate, train, eval, infer, inspect. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .checkpoint import describe_checkpoint, model_from_checkpoint, save_checkpoint, save_model
from .config import load_run_config
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import evaluate_detections
from .model import InferenceConfig, attention_dump, run_detection, save_detections
from .scene import KnowledgeBase, load_scenes
from .synth import generate_dataset
from .training import train, write_metrics_csv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kban", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override synth and train seeds")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config value")

    p = sub.add_parser("generate", help="write synthetic scene files and the knowledge base")
    common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a model on generated scenes")
    common(p)
    p.add_argument("--data", type=Path, required=True, help="directory with kb.json and train.jsonl")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")

    def inference_flags(p):
        p.add_argument("--t-human", type=float, default=None)
        p.add_argument("--t-object", type=float, default=None)
        p.add_argument("--suppression-threshold", type=float, default=None)

    p = sub.add_parser("eval", help="run detection over scenes and report role mAP")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--kb", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    inference_flags(p)

    p = sub.add_parser("infer", help="run detection and write triplets as JSON lines")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--kb", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-attention", default=None, metavar="HUMANID:OBJECTID",
                   help="also write decoder attention CSVs for this pair")
    inference_flags(p)

    p = sub.add_parser("inspect", help="list checkpoint hyperparameters and tensors")
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def _inference_config(args) -> InferenceConfig:
    run = load_run_config(args.config, args.overrides, args.seed)
    cfg = run.inference
    if args.t_human is not None:
        cfg.t_human = args.t_human
    if args.t_object is not None:
        cfg.t_object = args.t_object
    if args.suppression_threshold is not None:
        cfg.suppression_threshold = args.suppression_threshold
    return cfg


def cmd_generate(args) -> int:
    run = load_run_config(args.config, args.overrides, args.seed)
    paths = generate_dataset(run.synth, args.out)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.overrides, args.seed)
    kb = KnowledgeBase.load(args.data / "kb.json")
    scenes = load_scenes(args.data / "train.jsonl")
    val_path = args.data / "val.jsonl"
    val_scenes = load_scenes(val_path) if val_path.exists() else []
    model = None
    start_iteration = 0
    if args.resume is not None:
        model, start_iteration = model_from_checkpoint(args.resume, kb)
        if model.cfg != run.train.model_config(kb):
            raise DataError(
                f"checkpoint hyperparameters {model.cfg} do not match the configured model"
            )
    args.out.mkdir(parents=True, exist_ok=True)
    result = train(run.train, scenes, kb, val_scenes=val_scenes, model=model, start_iteration=start_iteration)
    write_metrics_csv(result.metrics, args.out / "metrics.csv")
    save_model(args.out / "checkpoint.kban", result.model, result.iterations_completed)
    if result.best_params is not None:
        save_checkpoint(
            args.out / "checkpoint_best.kban",
            result.model.cfg,
            result.best_params,
            result.best_iteration,
            result.model.seed,
        )
    print(f"trained to iteration {result.iterations_completed}; final loss {result.final_train_loss:.6f}")
    if result.final_val_loss is not None:
        print(f"validation loss {result.final_val_loss:.6f} (best {result.best_val_loss:.6f} "
              f"at iteration {result.best_iteration})")
    return 0


def cmd_eval(args) -> int:
    cfg = _inference_config(args)
    kb = KnowledgeBase.load(args.kb)
    model, _ = model_from_checkpoint(args.checkpoint, kb)
    scenes = load_scenes(args.scenes)
    detections = run_detection(model, scenes, cfg)
    report = evaluate_detections(detections, scenes)
    print(report.format_table())
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        save_detections(detections, args.out / "detections.jsonl")
        print(f"wrote {args.out / 'report.json'}")
    return 0


def _parse_pair_id(raw: str) -> tuple[int, int]:
    try:
        human_id, object_id = raw.split(":")
        return int(human_id), int(object_id)
    except ValueError:
        raise ConfigError(f"--dump-attention expects HUMANID:OBJECTID, got {raw!r}") from None


def cmd_infer(args) -> int:
    cfg = _inference_config(args)
    pair = _parse_pair_id(args.dump_attention) if args.dump_attention is not None else None
    kb = KnowledgeBase.load(args.kb)
    model, _ = model_from_checkpoint(args.checkpoint, kb)
    scenes = load_scenes(args.scenes)
    args.out.mkdir(parents=True, exist_ok=True)
    detections = run_detection(model, scenes, cfg)
    save_detections(detections, args.out / "detections.jsonl")
    print(f"wrote {sum(len(d) for d in detections)} triplets to {args.out / 'detections.jsonl'}")
    if pair is not None:
        human_id, object_id = pair
        dumped = False
        for index, scene in enumerate(scenes):
            ids = {inst.id for inst in scene.instances}
            if human_id not in ids or object_id not in ids:
                continue
            rows = attention_dump(model, scene, human_id, object_id)
            path = args.out / f"attention_scene{index}_{human_id}_{object_id}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["layer", "head", "verb", "instance_id", "weight"])
                for row in rows:
                    writer.writerow([row["layer"], row["head"], row["verb"], row["instance_id"], row["weight"]])
            print(f"wrote {path}")
            dumped = True
        if not dumped:
            raise DataError(f"pair {human_id}:{object_id} not present in any scene")
    return 0


def cmd_inspect(args) -> int:
    print(describe_checkpoint(args.checkpoint))
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
