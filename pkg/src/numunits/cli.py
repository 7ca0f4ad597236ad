"""numunits command line.

Exit codes: 0 success, 2 usage or configuration error, 3 missing or invalid
input files, 4 training diverged, 5 any other stage failure.
"""
from __future__ import annotations

import os

# One BLAS thread: results must not depend on the machine's core count.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

from . import __version__  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED, EXIT_STAGE = 0, 2, 3, 4, 5

SUBCOMMAND_STAGES = {
    "gen-data": ["gen-data"],
    "train": ["train"],
    "eval": ["eval"],
    "ablate": ["ablate"],
    "perm-test": ["perm-test"],
    "gat": ["gat"],
    "depth": ["depth"],
    "connectivity": ["connectivity"],
    "traces": ["traces"],
    "pipeline": None,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (overridden by command-line flags)")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--out", help="run directory")
    common.add_argument("--jobs", type=int, help="worker processes for ablation sweeps and permutations")
    common.add_argument("--mask", help='units to ablate during eval, e.g. "L2-U17,L2-U42"')
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config entry, e.g. --set train.epochs=4")
    common.add_argument("--checkpoint", metavar="MODEL_JSON",
                        help="analyse an external checkpoint instead of a trained model")
    common.add_argument("--force", action="store_true", help="rerun stages even if up to date")
    common.add_argument("--dry-run", action="store_true", help="print the stage plan and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="numunits", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"numunits {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate training corpus, NA-task stimuli and the depth dataset",
        "train": "train the LSTM language model (resumes an interrupted run)",
        "eval": "agreement accuracy per task and condition (optionally under --mask)",
        "ablate": "single-unit ablation sweep and LR-unit identification",
        "perm-test": "SR+LR and SR-only group ablations against random groups",
        "gat": "generalisation-across-time decoding and SR-unit identification",
        "depth": "depth regression and syntax-unit identification",
        "connectivity": "efferent and afferent weight analyses",
        "traces": "gate and cell trace plots of named units",
        "pipeline": "run every stage and write the index report",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return p


def resolve_config(args):
    from .pipeline import load_config, parse_assignment, _deep_merge

    over: dict = {}
    for item in args.set:
        over = _deep_merge(over, parse_assignment(item))
    for key in ("seed", "out", "jobs"):
        val = getattr(args, key)
        if val is not None:
            over[key] = val
    return load_config(args.config, over)


def _stage_plan(cmd: str):
    from .pipeline import STAGE_BY_NAME, STAGES

    names = SUBCOMMAND_STAGES[cmd]
    return STAGES if names is None else [STAGE_BY_NAME[n] for n in names]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .grammar import GrammarConfigError
    from .lstm import TrainingDiverged
    from .pipeline import (
        ConfigError, Run, StageError, import_checkpoint, run_stage, stage_eval, stage_is_current,
    )
    from .units import AblationMask

    try:
        cfg = resolve_config(args)
        mask = AblationMask.parse(args.mask) if args.mask else None
        if args.checkpoint and args.command in ("gen-data", "train", "pipeline"):
            raise ConfigError(f"--checkpoint applies to analysis commands, not {args.command}")
    except (ConfigError, ValueError) as exc:
        print(f"numunits: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        print(json.dumps(cfg.to_dict(), indent=1))
        return EXIT_OK
    stages = _stage_plan(args.command)
    if args.dry_run:
        print(f"run directory: {cfg.out}  config hash: {cfg.hash()}  seed: {cfg.seed}")
        for st in stages:
            print(f"  {st.name:<13} {st.description}")
        return EXIT_OK
    run = Run(cfg)
    run.write_json("config.json", {"config": cfg.portable()})
    dims = (cfg.model.n_layers, cfg.model.hidden_dim)
    if args.checkpoint:
        try:
            model = import_checkpoint(run, args.checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            print(f"numunits: cannot import checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
            return EXIT_INPUT
        dims = (len(model.layers), model.hidden_dim)
    try:
        if args.command == "eval" and mask is not None:
            mask.validate(*dims)
            for p in stage_eval(run, mask):
                print(p)
            return EXIT_OK
        for st in stages:
            if args.command != "pipeline":
                missing = [d for d in st.deps if not (run.root / ".stages" / f"{d}.json").exists()]
                if missing:
                    print(f"numunits: stage '{st.name}' needs {', '.join(missing)} first "
                          f"(run the matching subcommand or 'pipeline')", file=sys.stderr)
                    return EXIT_INPUT
            run_stage(run, st, force=args.force)
    except StageError as exc:
        print(f"numunits: {exc}", file=sys.stderr)
        if isinstance(exc.cause, TrainingDiverged):
            return EXIT_DIVERGED
        if isinstance(exc.cause, (FileNotFoundError, GrammarConfigError, KeyError, json.JSONDecodeError)):
            return EXIT_INPUT
        if isinstance(exc.cause, (ConfigError,)):
            return EXIT_CONFIG
        return EXIT_STAGE
    except (ValueError, KeyError, IndexError) as exc:
        print(f"numunits: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "pipeline":
        print(run.path("index.md"))
    else:
        for st in stages:
            print(f"{st.name}: {'ok' if stage_is_current(run, st) else 'incomplete'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
