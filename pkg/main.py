import argparse
import json
import logging
import os
import sys
from collections import Counter
from typing import Optional, Sequence

from dotenv import load_dotenv

from config import ConfigError, RunConfig, load_run_config, write_config_env
from graph import GRAPHS, SWEEP_PARAMS, bucket_tsg_sparsity, build_scene_graph, dataset_sparsity, export_graph, sweep_sparsity
from metrics import format_report_for_display
from neural import NumericError
from scene import SynthSpec
from storage import SPLITS, load_split, read_scene, resolve_scene, write_synthetic_dataset
from training import collect_examples, evaluate_examples, prediction_records, read_checkpoint, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def setup_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, os.getenv("SSGN_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s"
    )
    logging.getLogger().setLevel(level)


def _graphs(choice: str) -> list[str]:
    return list(GRAPHS) if choice == "all" else [choice]


def _write(path: str, data: bytes) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
    return path


# --- Commands ---
def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    if not os.path.exists(args.spec):
        raise FileNotFoundError(f"No synth spec found at {args.spec}")
    with open(args.spec, "r", encoding="utf-8") as f:
        spec = SynthSpec.model_validate_json(f.read())
    out_dir = args.out or cfg.data_dir
    manifest = write_synthetic_dataset(out_dir, cfg.seed, spec)
    write_config_env(out_dir, cfg)

    objects, tokens = Counter(), Counter()
    for scene_id in manifest.scene_ids():
        scene, _ = read_scene(out_dir, scene_id)
        objects[len(scene.objects)] += 1
        tokens[len(scene.tokens)] += 1
    print(f"Wrote {len(manifest.scene_ids())} scenes to {out_dir}")
    print("Splits: " + ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items()))
    print("Objects per scene: " + ", ".join(f"{k}:{objects[k]}" for k in sorted(objects)))
    print("Tokens per scene:  " + ", ".join(f"{k}:{tokens[k]}" for k in sorted(tokens)))
    return EXIT_OK


def _print_stats(sg) -> None:
    for graph in GRAPHS:
        s = sg.stats[graph]
        print(f"{graph.upper():<5} SR={s.ratio:.4f} pruned={s.pruned} total={s.total}")


def cmd_prune(args: argparse.Namespace, cfg: RunConfig) -> int:
    scene_id, scene = resolve_scene(cfg.data_dir, args.scene, **cfg.caps())
    sg = build_scene_graph(scene, cfg.prune(), cfg.model().toggles)
    _print_stats(sg)
    out_dir = args.out or cfg.out_dir
    for graph in _graphs(args.graph):
        path = _write(os.path.join(out_dir, f"{scene_id}.{graph}.{args.format}"), export_graph(sg, args.format, [graph]))
        logger.info("[prune] wrote %s", path)
    write_config_env(out_dir, cfg)
    return EXIT_OK


def cmd_export_graph(args: argparse.Namespace, cfg: RunConfig) -> int:
    scene_id, scene = resolve_scene(cfg.data_dir, args.scene_id, **cfg.caps())
    sg = build_scene_graph(scene, cfg.prune(), cfg.model().toggles)
    data = export_graph(sg, args.format, _graphs(args.graph))
    if args.out:
        path = _write(os.path.join(args.out, f"{scene_id}.{args.format}"), data)
        logger.info("[export] wrote %s", path)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


def cmd_stats(args: argparse.Namespace, cfg: RunConfig) -> int:
    scenes = [s for _, s in load_split(cfg.data_dir, args.split, **cfg.caps())]
    sr = dataset_sparsity(scenes, cfg.prune(), cfg.model().toggles)
    print(f"Split {args.split}: {len(scenes)} scenes")
    for graph in GRAPHS:
        print(f"{graph.upper():<5} SR={sr[graph]:.4f}")
    if args.token_cutoff is not None:
        for bucket, row in bucket_tsg_sparsity(scenes, args.token_cutoff, cfg.prune()).items():
            print(f"TSG tokens {bucket:<6} SR={row['sr']:.4f} share={row['share']:.4f} scenes={int(row['scenes'])}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values needs at least one value")
    scenes = [s for _, s in load_split(cfg.data_dir, args.split, **cfg.caps())]
    print(f"{args.param:<12} {'OTSG':>8} {'OSG':>8} {'TSG':>8}")
    for value, sr in sweep_sparsity(scenes, args.param, values, cfg.prune()):
        print(f"{value:<12} {sr['otsg']:>8.4f} {sr['osg']:>8.4f} {sr['tsg']:>8.4f}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    result = train(cfg, resume=args.resume)
    print(f"Trained to step {result.final_step}; best val acc: {result.best_val_acc}")
    print(f"Checkpoints: {result.last_checkpoint}, {result.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    loaded = read_checkpoint(args.checkpoint)
    run = loaded.config.model_copy(update={"data_dir": cfg.data_dir, "out_dir": cfg.out_dir})
    scenes = load_split(run.data_dir, args.split, **run.caps())
    examples = collect_examples(scenes, run)
    sparsity = dataset_sparsity([s for _, s in scenes], run.prune(), run.model().toggles)
    report = evaluate_examples(loaded.params, examples, loaded.vocabs, run.model(), split=args.split, sparsity=sparsity)

    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        f.write(json.dumps(report.model_dump(), indent=2, ensure_ascii=False) + "\n")
    with open(os.path.join(out_dir, "predictions.jsonl"), "w", encoding="utf-8") as f:
        f.writelines(line + "\n" for line in prediction_records(report))
    write_config_env(out_dir, run)
    print(format_report_for_display(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssgn", description="Sparse spatial graph network for scene-text question answering")
    parser.add_argument("--config", help="key=value run config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("spec")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prune", help="prune one scene and export its graphs")
    p.add_argument("scene", help="scene file path or dataset scene id")
    p.add_argument("--graph", choices=[*GRAPHS, "all"], default="all")
    p.add_argument("--format", choices=["json", "dot"], default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("stats", help="dataset sparsity ratios")
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--token-cutoff", type=int)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="sparsity ratio across threshold values")
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--split", choices=SPLITS, default="train")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-graph", help="export a dataset scene's pruned graph")
    p.add_argument("scene_id")
    p.add_argument("--format", choices=["json", "dot"], default="json")
    p.add_argument("--graph", choices=[*GRAPHS, "all"], default="all")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_graph)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    first_line = str(message).strip().splitlines()[0] if str(message).strip() else kind
    print(f"ssgn: error[{kind}]: {first_line}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    setup_logging(args.verbose)
    try:
        cfg = load_run_config(args.config, args.overrides, args.seed)
        return args.func(args, cfg)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except ConfigError as e:
        return _fail("config", str(e), EXIT_USAGE)
    except NumericError as e:
        return _fail("numeric", str(e), EXIT_NUMERIC)
    except (ValueError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        return _fail("data", str(e), EXIT_DATA)


if __name__ == "__main__":
    load_dotenv()
    sys.exit(main())
