"""``snipcl`` command line: gen-data, pretrain, finetune, eval, grad-check, experiment."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as config_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import GlobalConfig, RunConfig
from .data import generate_synthetic_dataset, read_dataset, skeleton_layout, write_dataset
from .encoder import normalized_adjacency
from .errors import SnipclError
from .fusion import LocalizationModel
from .gradcheck import TOLERANCE, run_suite
from .io_utils import atomic_write_text
from .metrics import (curves_csv, emit_metrics, finetune_rows, pretrain_rows)
from .pipeline import (evaluate, random_encoder, run_experiment, run_finetune, run_pretrain,
                       train_test)
from .pretrain import PretrainState

logger = logging.getLogger("snipcl")

OUT_ENV = "SNIPCL_OUT"


def experiment_defaults() -> RunConfig:
    """Desk-scale settings for the three-arm comparison."""
    cfg = RunConfig()
    cfg.data = dataclasses.replace(cfg.data, num_sequences=200, T=300, num_classes=4)
    cfg.augment = dataclasses.replace(cfg.augment, rotation_deg=10.0, shear=0.0, mask_prob=0.0)
    cfg.pretrain = dataclasses.replace(cfg.pretrain, bank_size=128, lam=1.5, snippets=19, key_momentum=0.99,
                                       batch_size=8, epochs=20, grad_clip=5.0)
    cfg.fusion = dataclasses.replace(cfg.fusion, hidden_dim=128)
    cfg.finetune = dataclasses.replace(cfg.finetune, epochs=40)
    return cfg


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ENV} or the config)")
    p.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _non_negative(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _pretrain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=_non_negative, help="dense loss weight")
    p.add_argument("--snippets", type=_positive_int, help="number of snippets N")
    p.add_argument("--no-dense-loss", action="store_true", help="video-level objective only")
    p.add_argument("--pretrain-epochs", type=int, help="Stage 1 epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snipcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic skeleton dataset")
    _common(p)
    p.add_argument("--num-sequences", type=_positive_int)
    p.add_argument("--frames", type=_positive_int, help="frames per sequence")
    p.add_argument("--classes", type=_positive_int)

    p = sub.add_parser("pretrain", help="Stage 1 contrastive pretraining")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    _pretrain_flags(p)

    p = sub.add_parser("finetune", help="Stage 2 localization finetuning and evaluation")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", type=Path, help="pretrained encoder (skips Stage 1)")
    src.add_argument("--from-scratch", action="store_true", help="random encoder, no Stage 1")
    p.add_argument("--mode", choices=("linear", "full"))
    p.add_argument("--label-fraction", type=_fraction)
    p.add_argument("--no-fusion", action="store_true", help="upsample the deepest level only")
    p.add_argument("--epochs", type=int, help="Stage 2 epochs")
    _pretrain_flags(p)

    p = sub.add_parser("eval", help="evaluate a finetuned checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--protocol", choices=("linear", "knn"))

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--seeds", type=_positive_int, default=20)

    p = sub.add_parser("experiment", help="three-arm directional experiment")
    _common(p)
    p.add_argument("--seeds", type=_positive_int, default=3, help="number of consecutive seeds")
    p.add_argument("--num-sequences", type=_positive_int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--strict", action="store_true", help="exit 1 when the ordering checks fail")
    return parser


# ---------------------------------------------------------------------------
# configuration assembly


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else (base or RunConfig())
    run = cfg.run
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
        cfg.data = dataclasses.replace(cfg.data, seed=args.seed)
    out = args.out or (Path(os.environ[OUT_ENV]) if os.environ.get(OUT_ENV) else None)
    if out is not None:
        run = dataclasses.replace(run, out_dir=str(out))
    if args.threads is not None:
        run = dataclasses.replace(run, threads=args.threads)
    cfg.run = run
    pre = cfg.pretrain
    if getattr(args, "lam", None) is not None:
        pre = dataclasses.replace(pre, lam=args.lam)
    if getattr(args, "snippets", None) is not None:
        pre = dataclasses.replace(pre, snippets=args.snippets)
    if getattr(args, "no_dense_loss", False):
        pre = dataclasses.replace(pre, dense_loss=False)
    if getattr(args, "pretrain_epochs", None) is not None:
        pre = dataclasses.replace(pre, epochs=args.pretrain_epochs)
    cfg.pretrain = pre
    if getattr(args, "no_fusion", False):
        cfg.fusion = dataclasses.replace(cfg.fusion, enabled=False)
    ft = cfg.finetune
    if getattr(args, "mode", None):
        ft = dataclasses.replace(ft, mode=args.mode)
    if getattr(args, "label_fraction", None) is not None:
        ft = dataclasses.replace(ft, label_fraction=args.label_fraction)
    if getattr(args, "epochs", None) is not None:
        ft = dataclasses.replace(ft, epochs=args.epochs)
    cfg.finetune = ft
    if getattr(args, "protocol", None):
        cfg.eval = dataclasses.replace(cfg.eval, protocol=args.protocol)
    return cfg


def _sync_shapes(cfg: RunConfig, dataset) -> RunConfig:
    """Take T, J and the class count from a dataset on disk."""
    seq = dataset[0][0]
    k = max((s.class_id for _, segs in dataset for s in segs), default=cfg.data.num_classes)
    cfg.data = dataclasses.replace(cfg.data, T=seq.T, J=seq.J, num_classes=max(k, cfg.data.num_classes))
    cfg.encoder = dataclasses.replace(cfg.encoder, T=seq.T, J=seq.J)
    return cfg.validate()


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _recorded_config(cfg: RunConfig) -> str:
    """Serialized config minus the output location, so identical runs record identical text."""
    run = dataclasses.replace(cfg.run, out_dir=GlobalConfig().out_dir)
    return config_mod.dumps(dataclasses.replace(cfg, run=run))


def _adjacency(cfg: RunConfig) -> np.ndarray:
    _, edges = skeleton_layout(cfg.encoder.J)
    return normalized_adjacency(cfg.encoder.J, edges)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    data = cfg.data
    if args.num_sequences:
        data = dataclasses.replace(data, num_sequences=args.num_sequences)
    if args.frames:
        data = dataclasses.replace(data, T=args.frames)
    if args.classes:
        data = dataclasses.replace(data, num_classes=args.classes)
    data.validate()
    out = _out_dir(cfg)
    write_dataset(out, generate_synthetic_dataset(data), fps=data.fps, J=data.J)
    print(f"wrote {data.num_sequences} sequences to {out}")
    return 0


def _save_pretrain(out: Path, cfg: RunConfig, state: PretrainState, history) -> None:
    ckpt = Checkpoint(trees={"query": state.params.query, "key": state.params.key},
                      config=_recorded_config(cfg), rng_state=state.rng_state,
                      meta={"stage": "pretrain", "steps": state.step})
    save_checkpoint(out / "checkpoint", ckpt)
    rows, columns = pretrain_rows(history)
    atomic_write_text(out / "loss_curves.csv", curves_csv(rows, columns))


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    dataset = read_dataset(args.data)
    cfg = _sync_shapes(cfg, dataset)
    train, _ = train_test(cfg, dataset)
    state, history = run_pretrain(cfg, train)
    out = _out_dir(cfg)
    _save_pretrain(out, cfg, state, history)
    if history:
        print(f"pretrained {state.step} steps; final loss {history[-1].l_total:.4f}")
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    dataset = read_dataset(args.data)
    cfg = _sync_shapes(cfg, dataset)
    train, test = train_test(cfg, dataset)
    out = _out_dir(cfg)
    history = []
    if args.checkpoint:
        query = load_checkpoint(args.checkpoint).trees.get("query")
        if query is None:
            raise SnipclError(f"{args.checkpoint} holds no pretrained encoder")
        adjacency = _adjacency(cfg)
    elif args.from_scratch:
        state = random_encoder(cfg)
        query, adjacency = state.params.query, state.adjacency
    else:
        state, history = run_pretrain(cfg, train)
        _save_pretrain(out, cfg, state, history)
        query, adjacency = state.params.query, state.adjacency
    model, ft_history = run_finetune(cfg, query, adjacency, train)
    report = evaluate(cfg, model, train, test)
    save_checkpoint(out / "model", Checkpoint(
        trees={"model": model.params}, config=_recorded_config(cfg),
        meta={"stage": "finetune", "num_classes": model.num_classes}))
    rows, columns = pretrain_rows(history)
    emit_metrics(report, rows, out, columns)
    ft_rows, ft_columns = finetune_rows(ft_history)
    atomic_write_text(out / "finetune_curves.csv", curves_csv(ft_rows, ft_columns))
    print(f"avg mAP {report.avg_map:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, requires_grad=False)
    if "model" not in ckpt.trees:
        raise SnipclError(f"{args.checkpoint} holds no finetuned model")
    base = config_mod.loads(ckpt.config) if ckpt.config else RunConfig()
    cfg = resolve_config(args, base=base)
    dataset = read_dataset(args.data)
    cfg = _sync_shapes(cfg, dataset)
    train, test = train_test(cfg, dataset)
    split = {"test": test, "train": train, "all": train + test}[args.split]
    model = LocalizationModel(cfg.encoder, cfg.fusion, int(ckpt.meta.get("num_classes", cfg.data.num_classes)),
                              ckpt.trees["model"], _adjacency(cfg))
    report = evaluate(cfg, model, train, split)
    out = _out_dir(cfg)
    emit_metrics(report, [], out)
    print(f"avg mAP {report.avg_map:.4f}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = resolve_config(args)
    results, elapsed = run_suite(args.seeds)
    rows = [{"op": r.name, "seed": r.seed, "max_rel_error": r.error, "passed": int(r.passed)} for r in results]
    out = _out_dir(cfg)
    atomic_write_text(out / "grad_check.csv", curves_csv(rows, ("op", "seed", "max_rel_error", "passed")))
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    for name, err in worst.items():
        print(f"{'PASS' if err <= TOLERANCE else 'FAIL'} {name:24s} max rel err {err:.2e}")
    failed = [n for n, e in worst.items() if e > TOLERANCE]
    print(f"{len(worst) - len(failed)}/{len(worst)} ops passed over {args.seeds} seeds in {elapsed:.1f}s")
    return 1 if failed else 0


def cmd_experiment(args) -> int:
    cfg = resolve_config(args, base=experiment_defaults())
    if args.num_sequences:
        cfg.data = dataclasses.replace(cfg.data, num_sequences=args.num_sequences)
    cfg.validate()
    out = _out_dir(cfg)
    seeds = [cfg.run.seed + i for i in range(args.seeds)]

    def show(r):
        print(f"seed {r['seed']} arm {r['arm']:6s} avg mAP {r['report'].avg_map:.4f}", flush=True)

    results, summary = run_experiment(cfg, seeds, on_result=show)
    dense = sorted((r for r in results if r["arm"] == "dense"), key=lambda r: r["report"].avg_map)
    median_run = dense[len(dense) // 2]
    rows, columns = pretrain_rows(median_run["pretrain"])
    emit_metrics(median_run["report"], rows, out, columns)
    table = [{"seed": r["seed"], "arm": r["arm"], "avg_map": r["report"].avg_map} for r in results]
    atomic_write_text(out / "experiment.csv", curves_csv(table, ("seed", "arm", "avg_map")))
    atomic_write_text(out / "experiment.json", json.dumps(
        {"seeds": seeds, "runs": table, **summary, "config": _recorded_config(cfg)},
        indent=1, sort_keys=True) + "\n")
    for name, ok in summary["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print("median avg mAP: " + ", ".join(f"{a}={v:.4f}" for a, v in summary["median_avg_map"].items()))
    return 1 if args.strict and not summary["passed"] else 0


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "eval": cmd_eval, "grad-check": cmd_grad_check, "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (SnipclError, OSError) as exc:
        print(f"snipcl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
