"""Command-line entry point: prepare, train, evaluate, coldstart-report, verify."""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    ParseError, ValidationError, load_ckg, load_prepared, split_dataset, with_sampled_negatives, write_idmap,
    write_triples,
)
from .evaluation import TOPK_SWEEP, config_hash, evaluate, popularity_scorer
from .referencing import build_seed_pool
from .training import (
    CheckpointError, NonFiniteLossError, TrainConfig, evaluation_model, load_checkpoint, train, train_view,
)

EXIT_FAILURE = 1
EXIT_USAGE = 2

# flag -> TrainConfig field
CONFIG_FLAGS = {
    "d": "d", "K": "K", "l": "l", "batch": "batch_size", "lr": "learning_rate", "lambda1": "lambda1",
    "lambda2": "lambda2", "eta": "eta", "tau": "tau", "seeds_per_side": "seeds_per_side",
    "max_epochs": "max_epochs", "patience": "patience", "seed": "rng_seed", "threads": "threads",
    "dtype": "dtype", "no_referencing": "use_referencing", "masked_referencing": "masked_referencing",
}


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_run(out: Path, command: str, args: argparse.Namespace, started: str, **fields) -> None:
    """Per-invocation record with timestamps; kept apart from the deterministic outputs."""
    record = {"command": command, "argv": sys.argv[1:], "started": started, "finished": _now(),
              "output_directory": str(out.resolve())}
    record.update(fields)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("KPER_THREADS")
    return int(env) if env else 1


def effective_config(args: argparse.Namespace, base: TrainConfig | None = None) -> TrainConfig:
    """Defaults (or ``base``), overridden by ``--config`` JSON, overridden by explicit flags."""
    values = (base or TrainConfig()).to_dict()
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CommandError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(file_values) - set(values)
        if unknown:
            raise CommandError(f"{args.config}: unknown config keys {sorted(unknown)}")
        values.update(file_values)
    for flag, key in CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        if flag == "no_referencing":
            if v:
                values[key] = False
        elif flag == "masked_referencing":
            if v:
                values[key] = True
        else:
            values[key] = v
    if getattr(args, "threads", None) is None and os.environ.get("KPER_THREADS"):
        values["threads"] = int(os.environ["KPER_THREADS"])
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"invalid configuration: {exc}") from exc


def cmd_prepare(args) -> int:
    started = _now()
    for p in (args.ratings, args.kg):
        if not Path(p).is_file():
            raise CommandError(f"input file not found: {p}")
    out = _out_dir(args.out)
    g = load_ckg(args.ratings, args.kg)
    g = with_sampled_negatives(g, [args.seed, 0])
    split = split_dataset(g, args.seed)
    header = "user\titem\tlabel"
    write_triples(split.train, out / "train.tsv", header)
    write_triples(split.validation, out / "val.tsv", header)
    write_triples(split.test, out / "test.tsv", header)
    write_triples(g.triples, out / "kg.tsv", "head\trelation\ttail")
    write_idmap(g, out / "idmap.tsv")
    pool = build_seed_pool(train_view(g, split), args.seeds_per_side)
    pool.write_tsv(out / "seeds.tsv")
    manifest = {
        "command": "prepare",
        "seed": args.seed,
        "counts": {"users": g.num_users, "items": g.num_items, "entities": g.num_entities,
                   "relations": g.num_relations},
        "inputs": {"ratings": {"path": str(args.ratings), "sha256": _sha256(args.ratings)},
                   "kg": {"path": str(args.kg), "sha256": _sha256(args.kg)}},
        "splits": {"train": len(split.train), "val": len(split.validation), "test": len(split.test)},
        "seeds_per_side": args.seeds_per_side,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_run(out, "prepare", args, started, seed=args.seed, ratings=args.ratings, kg=args.kg)
    print(f"prepared {len(split.train)}/{len(split.validation)}/{len(split.test)} interactions "
          f"(train/val/test) in {out}")
    return 0


def _load_prepared(path):
    if not (Path(path) / "manifest.json").is_file():
        raise CommandError(f"prepared directory not found or incomplete: {path}")
    return load_prepared(path)


def cmd_train(args) -> int:
    started = _now()
    resume = _load_ckpt(args.resume) if args.resume else None
    # a resumed run keeps its saved settings unless a flag says otherwise
    config = effective_config(args, resume.config if resume else None)
    g, split = _load_prepared(args.prepared)
    out = _out_dir(args.out)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    try:
        result = train(g, split, config, out, resume=resume, log=None if args.quiet else print)
    except CheckpointError as exc:
        raise CommandError(str(exc)) from exc
    except NonFiniteLossError as exc:
        _write_run(out, "train", args, started, status="non-finite loss", error=str(exc))
        raise CommandError(str(exc)) from exc
    _write_run(out, "train", args, started, prepared=str(args.prepared), config=config.to_dict(),
               config_hash=config_hash(config.to_dict()), best_epoch=result.best.epoch,
               best_val_recall_at_10=result.best.best_metric, epochs_run=result.last.epoch)
    print(f"best validation Recall@10 {result.best.best_metric:.4f} at epoch {result.best.epoch}; "
          f"checkpoints in {out}")
    return 0


def _load_ckpt(path):
    if not Path(path).is_file():
        raise CommandError(f"checkpoint not found: {path}", EXIT_USAGE)
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CommandError(str(exc)) from exc


def _report(args, g, split):
    if args.baseline == "popularity":
        meta = {"model": "popularity", "split_seed": split.split_seed}
        scorer = popularity_scorer(split.train, g.num_items)
        pair = lambda u, i: scorer(u)[np.arange(len(u)), i]
        return evaluate(scorer, g, split, pair_scorer=pair, psr_beta=args.psr_beta, metadata=meta)
    if not args.checkpoint:
        raise CommandError("--checkpoint is required unless --baseline is given", EXIT_USAGE)
    ckpt = _load_ckpt(args.checkpoint)
    try:
        model, nb = evaluation_model(ckpt, g, split)
    except CheckpointError as exc:
        raise CommandError(str(exc)) from exc
    meta = {"model": "kper", "config_hash": config_hash(ckpt.config.to_dict()),
            "checkpoint_id": _sha256(args.checkpoint)[:12], "split_seed": split.split_seed,
            "epoch": ckpt.epoch}
    cache = model.hop_cache(nb)
    return evaluate(model.scorer(nb), g, split, ks=TOPK_SWEEP,
                    pair_scorer=lambda u, i: model.score_pairs(u, i, nb, hop_cache=cache),
                    psr_beta=args.psr_beta, metadata=meta)


def cmd_evaluate(args) -> int:
    started = _now()
    g, split = _load_prepared(args.prepared)
    report = _report(args, g, split)
    out = _out_dir(args.out)
    (out / "report.tsv").write_text(report.to_tsv())
    (out / "report.txt").write_text(report.to_table())
    _write_run(out, "evaluate", args, started, metadata=report.metadata)
    print(report.to_table(), end="")
    return 0


def cmd_coldstart(args) -> int:
    started = _now()
    g, split = _load_prepared(args.prepared)
    report = _report(args, g, split)
    out = _out_dir(args.out)
    lines = ["group\tusers\ttrain_interactions\trecall@10"]
    for name in ("warm", "normal", "cold"):
        lines.append(f"{name}\t{report.group_sizes.get(name, 0)}\t{report.group_interactions.get(name, 0)}\t"
                     f"{report.groups.get(name, float('nan'))!r}")
    for k, v in sorted(report.psr.items()):
        lines.append(f"# psr@{k} beta={report.psr_beta}\t{v!r}")
    text = "\n".join(lines) + "\n"
    (out / "coldstart.tsv").write_text(text)
    _write_run(out, "coldstart-report", args, started, metadata=report.metadata)
    print(text, end="")
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    names = args.suite or list(SUITES)
    results = run_suites(names, seed=args.seed, corrupt_gradient=args.corrupt_gradient)
    for r in results:
        print(r.line())
        if args.verbose or not r.passed:
            for d in r.details:
                print(f"  {d}")
    return 0 if all(r.passed for r in results) else EXIT_FAILURE


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of training settings; flags override it")
    p.add_argument("--seed", type=int, help="run seed for initialization and sampling")
    p.add_argument("--d", type=int, help="embedding size")
    p.add_argument("--K", type=int, help="number of knowledge hops (0 disables them)")
    p.add_argument("--l", type=int, help="sampled neighbors and triples per hop")
    p.add_argument("--batch", type=int, help="mini-batch size")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--lambda1", type=float, help="sparsity penalty weight")
    p.add_argument("--lambda2", type=float, help="L2 weight")
    p.add_argument("--eta", type=float, help="lower stretch bound of the gates (negative)")
    p.add_argument("--tau", type=float, help="gate temperature")
    p.add_argument("--seeds-per-side", type=int, dest="seeds_per_side", help="seed users and seed items")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int, help="epochs without validation improvement before stopping")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--no-referencing", action="store_true", default=None, dest="no_referencing",
                   help="drop the seed referencing branch")
    p.add_argument("--masked-referencing", action="store_true", default=None, dest="masked_referencing",
                   help="mix only seeds whose gate is open")


def _add_threads(p: argparse.ArgumentParser) -> None:
    # also accepted after the subcommand; SUPPRESS keeps an earlier value
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kper", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="intra-op threads (default: KPER_THREADS or 1, which keeps runs bitwise reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse raw files, split 6:2:2, write ids and the seed pool")
    p.add_argument("--ratings", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds-per-side", type=int, default=64, dest="seeds_per_side")
    _add_threads(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a prepared directory")
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--quiet", action="store_true")
    _add_train_flags(p)
    _add_threads(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "Top-K, AUC, PSR and cold-group report"),
                                 ("coldstart-report", cmd_coldstart, "warm / normal / cold user groups")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint")
        p.add_argument("--prepared", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--baseline", choices=("popularity",))
        p.add_argument("--psr-beta", type=float, default=0.1, dest="psr_beta")
        _add_threads(p)
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="gradient, gate-law, sparsity and metric self-checks")
    p.add_argument("--suite", action="append", choices=("gradients", "gates", "sparsity", "metrics"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--corrupt-gradient", action="store_true", dest="corrupt_gradient", help=argparse.SUPPRESS)
    _add_threads(p)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    import torch

    torch.set_num_threads(_threads(args))
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"kper {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except (ParseError, ValidationError) as exc:
        print(f"kper {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
