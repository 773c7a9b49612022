"""Command-line entry point: generate, train, adapt-score, evaluate, selfcheck, ablate.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import benchgen
from .anomaly import read_scores, write_scores
from .autodiff import GraphError, ShapeError
from .checkpoint import CheckpointError
from .config import SEED_ENV, RunConfig, default_seed
from .episodic import EpisodeError
from .evaluation import evaluate
from .frontend import AudioFormatError

log = logging.getLogger("fewshot_asd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# flag dest -> RunConfig key
_CONFIG_FLAGS = {
    "dataset": "dataset", "machine": "machine", "tasks": "tasks", "hidden": "encoder_hidden",
    "bottleneck": "bottleneck", "outer_steps": "outer_steps", "inner_iters": "inner_iters",
    "finetune_iters": "finetune_iters", "epsilon_start": "epsilon_start", "epsilon_end": "epsilon_end",
    "optimizer": "optimizer", "lr": "lr", "beta1": "beta1", "beta2": "beta2", "oe": "oe",
    "oe_lambda": "oe_lambda", "oe_modes": "oe_modes", "support": "support_size", "query": "query_size",
    "aggregation": "aggregation", "seed": "seed", "checkpoint_dir": "checkpoint_dir",
    "scores": "scores", "report": "report",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--dataset", help="benchmark directory")
    p.add_argument("--machine", help="restrict to one machine type")
    p.add_argument("--tasks", help='"all", "section_only" or comma-separated task names')
    p.add_argument("--hidden", type=_int_list, help="hidden widths, e.g. 256,256")
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--outer-steps", type=int)
    p.add_argument("--inner-iters", type=int, help="T")
    p.add_argument("--finetune-iters", type=int, help="T_test")
    p.add_argument("--epsilon-start", type=float)
    p.add_argument("--epsilon-end", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--oe", dest="oe", action="store_true", default=None, help="enable outlier exposure")
    p.add_argument("--no-oe", dest="oe", action="store_false", default=None,
                   help="disable outlier exposure")
    p.add_argument("--lambda", dest="oe_lambda", type=float, help="outlier exposure weight")
    p.add_argument("--oe-modes", type=_str_list, help="comma list of other_machines,freq_warp")
    p.add_argument("--support", type=int, help="support clips per class")
    p.add_argument("--query", type=int, help="query clips per class")
    p.add_argument("--aggregation", choices=("mean", "max"))
    p.add_argument("--seed", type=int, help=f"defaults to ${SEED_ENV} or 0")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--scores", help="score CSV path")
    p.add_argument("--report", help="report CSV path")


def load_config(args) -> RunConfig:
    base = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {key: getattr(args, dest, None) for dest, key in _CONFIG_FLAGS.items()}
    cfg = base.override(**changes)
    log.info("effective config:\n%s", cfg.dumps().rstrip())
    return cfg


def _load_dataset(cfg: RunConfig) -> benchgen.Dataset:
    if not cfg.dataset:
        raise UsageError("no dataset given (--dataset or config 'dataset')")
    return benchgen.load(cfg.dataset)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.spec:
        spec = benchgen.BenchmarkSpec.from_file(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
    else:
        counts = benchgen.Counts(args.train_source, args.fewshot, args.test_normal, args.test_anomalous)
        seed = default_seed() if args.seed is None else args.seed
        spec = benchgen.default_spec(args.machines, args.sections, seed, counts, args.clip_seconds)
    spec.validate()
    out = benchgen.generate(spec, args.out)
    n = sum(1 for _ in benchgen.plan_clips(spec))
    print(f"wrote {n} clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import machines_for, train_machine, write_loss_log

    cfg = load_config(args)
    dataset = _load_dataset(cfg)
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.json")
    for machine in machines_for(dataset, cfg):
        def progress(e, machine=machine):
            if e.step % max(1, cfg.outer_steps // 10) == 0 or e.step == cfg.outer_steps - 1:
                log.info("%s step %d/%d task=%s eps=%.3f loss=%.4f", machine, e.step + 1,
                         cfg.outer_steps, e.task, e.epsilon, e.loss)

        model, result = train_machine(dataset, machine, cfg, progress)
        path = out_dir / f"{machine}.ckpt"
        model.save(path)
        write_loss_log(out_dir / f"{machine}_loss.csv", result)
        if result.log:
            first, last = result.log[0].loss, result.log[-1].loss
            print(f"{machine}: {path} (loss {first:.4f} -> {last:.4f}, tasks {model.task_names})")
        else:
            print(f"{machine}: {path} (no training steps)")
    return EXIT_OK


def _checkpoints(cfg: RunConfig, given: list[str] | None) -> list[Path]:
    if given:
        return [Path(p) for p in given]
    found = sorted(Path(cfg.checkpoint_dir).glob("*.ckpt"))
    if not found:
        raise CheckpointError(f"no checkpoints in {cfg.checkpoint_dir}")
    return found


def cmd_adapt_score(args) -> int:
    from .pipeline import Model, score_machine

    cfg = load_config(args)
    if args.no_finetune:
        cfg = cfg.override(finetune_iters=0)
    dataset = _load_dataset(cfg)
    scores = []
    for path in _checkpoints(cfg, args.checkpoint):
        model = Model.load(path)
        if model.machine not in dataset.machines:
            raise benchgen.DataError(f"{path}: machine {model.machine!r} not in dataset")
        if cfg.machine and model.machine != cfg.machine:
            continue
        scores.extend(score_machine(dataset, model, cfg))
    out = Path(args.out or cfg.scores)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(out, scores)
    print(f"wrote {len(scores)} scores to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        scores = read_scores(args.scores)
    except (ValueError, KeyError) as exc:
        raise benchgen.DataError(str(exc)) from exc
    if not scores:
        raise benchgen.DataError(f"{args.scores}: no score rows")
    report = evaluate(scores, args.max_fpr, {"scores": str(args.scores)})
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.out)
    print(report.table())
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    results = run_all(inject_bug=args.inject_grad_bug)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = load_config(args)
    dataset = _load_dataset(cfg)
    dataset.preload()
    result = run_ablation(dataset, cfg, args.seeds,
                          progress=lambda r: log.info("seed %d %s: target AUROC %.4f (%.1fs)",
                                                      r.seed, r.arm, r.target_auroc, r.seconds))
    if args.out:
        result.write_csv(args.out)
    print(result.table(args.margin))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fewshot-asd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic benchmark")
    p.add_argument("--spec", help="BenchmarkSpec JSON; otherwise the default spec")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help=f"defaults to ${SEED_ENV} or 0")
    p.add_argument("--machines", type=int, default=1)
    p.add_argument("--sections", type=int, default=2)
    p.add_argument("--clip-seconds", type=float, default=10.0)
    p.add_argument("--train-source", type=int, default=100)
    p.add_argument("--fewshot", type=int, default=3)
    p.add_argument("--test-normal", type=int, default=25)
    p.add_argument("--test-anomalous", type=int, default=25)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="meta-train one model per machine")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt-score", help="fine-tune on few-shot clips and score the test set")
    _add_config_flags(p)
    p.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    p.add_argument("--no-finetune", action="store_true", help="score with T_test = 0")
    p.add_argument("--out", help="score CSV (default: config 'scores')")
    p.set_defaults(func=cmd_adapt_score)

    p = sub.add_parser("evaluate", help="AUROC / pAUROC report from a score CSV")
    p.add_argument("scores", help="score CSV")
    p.add_argument("--out", help="report CSV")
    p.add_argument("--max-fpr", type=float, default=0.1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selfcheck", help="gradient, likelihood and AUROC self-checks")
    p.add_argument("--inject-grad-bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("ablate", help="run the ablation ladder over several seeds")
    _add_config_flags(p)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--margin", type=float, default=0.01)
    p.add_argument("--out", help="per-seed results CSV")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (benchgen.DataError, EpisodeError, AudioFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, GraphError, ShapeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
