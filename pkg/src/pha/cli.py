"""Command-line front door.

Verbs: train | adapt | export-similarity | verify | param-count.
Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical abort. The PHA_THREADS environment variable caps BLAS/OpenMP
threads (default 1, which is also what the determinism guarantees assume);
it must be applied before numpy loads, so heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _apply_thread_cap() -> None:
    cap = os.environ.get("PHA_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pha",
                                     description="prototype-conditioned adapter experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="pretrain backbone (if needed) and run multi-task training")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)

    p_adapt = sub.add_parser("adapt", help="few-shot adaptation of a trained checkpoint")
    p_adapt.add_argument("--checkpoint", required=True)
    p_adapt.add_argument("--task", required=True)
    p_adapt.add_argument("--shots", type=int, required=True)
    p_adapt.add_argument("--seed", type=int, required=True)
    p_adapt.add_argument("--out", default=None,
                         help="directory for adapt_result.json (default: checkpoint dir)")
    p_adapt.add_argument("--init", choices=["retrieved", "random"], default="retrieved")

    p_sim = sub.add_parser("export-similarity", help="similarity matrix of probes vs prototypes")
    p_sim.add_argument("--checkpoint", required=True)
    p_sim.add_argument("--suite", required=True, help="JSON file listing probe tasks")
    p_sim.add_argument("--out", required=True, help="output CSV path")
    p_sim.add_argument("--embeddings-out", default=None,
                       help="optional CSV of raw retrieval vectors")

    p_verify = sub.add_parser("verify", help="gradient, census, and zero-init self-checks")
    p_verify.add_argument("--config", required=True)
    p_verify.add_argument("--checkpoint", default=None,
                          help="check a stored checkpoint's census instead of a fresh build")

    p_count = sub.add_parser("param-count", help="closed-form trainable-parameter budget")
    p_count.add_argument("--config", required=True)
    return parser


def _cmd_train(args) -> int:
    import numpy as np

    from .config import load_run_config
    from .model import build_backbone
    from .training import (build_run_system, load_backbone_checkpoint,
                           pretrain_backbone, save_backbone_checkpoint,
                           train_multitask)

    run = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = run.model_config()
    if run.backbone_checkpoint:
        backbone = load_backbone_checkpoint(run.backbone_checkpoint, cfg)
    else:
        backbone, info = pretrain_backbone(cfg, run.pretrain, run.seed, progress=True)
        save_backbone_checkpoint(out / "backbone.pha", backbone, cfg, info)
    system = build_run_system(run, backbone)
    summary = train_multitask(system, run, out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_adapt(args) -> int:
    import numpy as np

    from .autodiff import Tensor
    from .errors import ConfigError
    from .tasks import CharTokenizer, DEFAULT_ALPHABET, generate_examples, split_few_shot
    from .training import adapt_few_shot, evaluate, load_system_checkpoint

    system, run, meta = load_system_checkpoint(args.checkpoint)
    entries = {t.name: (i, t) for i, t in enumerate(run.tasks)}
    for j, t in enumerate(run.heldout_tasks):
        entries[t.name] = (len(run.tasks) + j, t)
    if args.task not in entries:
        raise ConfigError(f"unknown task {args.task!r}; checkpoint knows "
                          f"{sorted(entries)}")
    task_id, entry = entries[args.task]
    tok = CharTokenizer(DEFAULT_ALPHABET)
    pool = generate_examples(entry.spec(), entry.n_train, task_id, tok)
    support, test = split_few_shot(pool, args.shots, args.seed)

    result = adapt_few_shot(system, support, run.train, args.seed, init=args.init)
    before = evaluate(system, test, embedding=Tensor(result["initial_embedding"]),
                      tcfg=run.train)
    after = evaluate(system, test, embedding=result["embedding"], tcfg=run.train)

    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "task": args.task,
        "shots": args.shots,
        "seed": args.seed,
        "init": args.init,
        "retrieved_task": result["retrieved_task"],
        "retrieved_index": result["retrieved_index"],
        "scores": [float(s) for s in result["scores"]],
        "accuracy_before": before["sequence_accuracy"],
        "accuracy_after": after["sequence_accuracy"],
    }
    with open(out_dir / "adapt_result.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def _load_suite(path):
    from .config import SCHEMA_VERSION, _parse_task, _take, _REQUIRED
    from .errors import ConfigError

    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"suite file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"suite is not valid JSON: {err}")
    top = _take("suite", data, {
        "schema_version": (int, _REQUIRED),
        "probe_examples": (int, 64),
        "tasks": (list, _REQUIRED),
    })
    if top["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"suite schema_version must be {SCHEMA_VERSION}")
    tasks = [_parse_task(f"suite.tasks[{i}]", t) for i, t in enumerate(top["tasks"])]
    return tasks, top["probe_examples"]


def _cmd_export_similarity(args) -> int:
    from .errors import ConfigError
    from .tasks import CharTokenizer, DEFAULT_ALPHABET, generate_examples
    from .training import (load_system_checkpoint, similarity_rows,
                           write_embeddings_csv, write_similarity_csv)

    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    system, run, meta = load_system_checkpoint(args.checkpoint)
    tasks, n_probe = _load_suite(args.suite)
    tok = CharTokenizer(DEFAULT_ALPHABET)
    probe_sets = []
    for j, entry in enumerate(tasks):
        examples = generate_examples(entry.spec(), n_probe, j, tok)
        probe_sets.append((entry.name, examples))
    rows = similarity_rows(system, probe_sets, run.train)
    write_similarity_csv(args.out, system.bank.task_names, rows)
    if args.embeddings_out:
        write_embeddings_csv(args.embeddings_out, system,
                             [(j, ex) for j, (_, ex) in enumerate(probe_sets)],
                             run.train)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .config import load_run_config
    from .verify import census_check, gradient_check, zero_init_check

    run = load_run_config(args.config)
    failures = []

    err = gradient_check(run)
    ok = err < 1e-4
    print(f"[{'PASS' if ok else 'FAIL'}] gradient-check: max relative error {err:.3e} "
          f"(threshold 1e-4)")
    if not ok:
        failures.append("gradient-check")

    expected, observed = census_check(run, args.checkpoint)
    ok = expected == observed
    print(f"[{'PASS' if ok else 'FAIL'}] parameter-census: formula {expected} vs "
          f"observed {observed}")
    if not ok:
        failures.append("parameter-census")

    ok = zero_init_check(run)
    print(f"[{'PASS' if ok else 'FAIL'}] zero-init-equivalence: generated and shared "
          f"adapters at zero reproduce the plain backbone")
    if not ok:
        failures.append("zero-init-equivalence")

    if failures:
        print(f"verification failed: {', '.join(failures)}")
        return EXIT_VERIFY_FAILED
    return EXIT_OK


def _cmd_param_count(args) -> int:
    from .config import load_run_config
    from .mechanism import count_parameters

    run = load_run_config(args.config)
    report = count_parameters(run.model_config(), run.model.retrieval_dim,
                              run.model.hyper_dim, len(run.tasks))
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    from .errors import ConfigError, ContractError, TokenizationError, TrainingDivergedError

    handler = {
        "train": _cmd_train,
        "adapt": _cmd_adapt,
        "export-similarity": _cmd_export_similarity,
        "verify": _cmd_verify,
        "param-count": _cmd_param_count,
    }[args.command]
    try:
        return handler(args)
    except (ConfigError, TokenizationError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as err:
        print(f"numerical abort: {err} (last checkpoint: {err.last_checkpoint})",
              file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
