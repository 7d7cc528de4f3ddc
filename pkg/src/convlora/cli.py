"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``analyze``, ``ablate``, ``gradcheck`` and
``gen-data``.  Settings come from an optional ``--config`` file (see
:mod:`convlora.config`); named flags and repeated ``--set section.key=value``
override it.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .errors import CheckpointError, ConfigError

log = logging.getLogger("convlora")

# flag -> config key
FLAG_KEYS = {
    "seed": "seed", "variant": "variant", "task": "task", "epochs": "epochs", "lr": "lr",
    "batch_size": "batch_size", "weight_decay": "weight_decay", "rank": "adapter.rank",
    "top_k": "adapter.top_k", "balance_weight": "adapter.balance_weight",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="structured-text config file")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. data.n_train=128")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant")
    p.add_argument("--task")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--balance-weight", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convlora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one variant")
    _config_args(p)

    p = sub.add_parser("eval", help="evaluate a trained run directory")
    p.add_argument("run", type=Path, help="directory written by train")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", type=Path)

    p = sub.add_parser("analyze", help="attention distance, spectra and expert usage of a run")
    p.add_argument("run", type=Path)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--images", type=int, default=100, help="images for the spectrum and distances")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=("moe-vs-multiscale", "scale-sweep", "rank-sweep"))
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    _config_args(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=20)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to .npz")
    _config_args(p)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    return parser


def _overrides(args) -> dict:
    ov = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            ov[key] = str(v)
    if getattr(args, "out", None) is not None:
        ov["out"] = str(args.out)
    return ov


def _load(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _print_metrics(rec) -> None:
    for k, v in rec.values.items():
        print(f"{k}\t{v:.6f}")


def cmd_train(args) -> int:
    from .encoder import count_params
    from .training import train

    cfg = _load(args)
    res = train(cfg)
    trainable, total, ratio = count_params(res.model, res.mask)
    print(f"run {cfg.variant} seed {cfg.seed}: best epoch {res.best_epoch}, "
          f"trainable {trainable}/{total} ({100 * ratio:.2f}%)")
    _print_metrics(res.test)
    print(f"artifacts in {cfg.out}")
    return 0


def cmd_eval(args) -> int:
    from .analysis import expert_utilization, write_report_csv
    from .seg import write_metrics_csv
    from .training import evaluate

    rec, decisions = evaluate(args.run, args.split)
    out = args.out or args.run
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / f"eval_{args.split}.csv", rec.rows(args.run.name, -1, args.split))
    if decisions:
        hist = expert_utilization(decisions)
        write_report_csv(out / f"utilization_{args.split}.csv", ("expert", "count", "frequency"),
                         [(i, int(c), float(f)) for i, (c, f) in enumerate(zip(hist.counts, hist.frequencies))])
    _print_metrics(rec)
    return 0


def cmd_analyze(args) -> int:
    from .analysis import (expert_utilization, fourier_log_amplitude, mean_attention_distance,
                           write_pgm, write_report_csv)
    from .data import gen_synthetic
    from .training import build_model, load_checkpoint, predict

    cfg = load_config(args.run / "run.cfg")
    model, _ = build_model(cfg)
    load_checkpoint(model, args.run / "checkpoint")
    data = gen_synthetic(cfg.data, cfg.seed, args.split)
    images = data.images[: args.images]
    pred, _, states = predict(cfg, model, images)
    out = args.out or args.run / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    n_layers = len(states[0].attn)
    attn = [np.concatenate([s.attn[l] for s in states]) for l in range(n_layers)]
    hidden = [np.concatenate([s.hidden[l] for s in states]) for l in range(n_layers)]
    dist = mean_attention_distance(attn, model.encoder.cfg.grid)
    write_report_csv(out / "attention_distance.csv", ("layer", "head", "distance"), dist.rows())
    spec = fourier_log_amplitude(hidden)
    write_report_csv(out / "spectrum.csv", ("layer", "radius", "rel_log_amp"), spec.rows())
    decisions = [d for s in states for d in s.decisions]
    if decisions:
        hist = expert_utilization(decisions)
        rows = [(f"{k[0]}.{k[1]}", i, int(c)) for k, counts in hist.per_layer.items()
                for i, c in enumerate(counts)]
        write_report_csv(out / "utilization.csv", ("adapter", "expert", "count"), rows)
    for i in range(min(4, len(pred))):
        write_pgm(out / f"pred_{i}.pgm", pred[i].astype(float))
        write_pgm(out / f"gt_{i}.pgm", data.labels[i].astype(float))
    for l, row in enumerate(dist.distances):
        print(f"layer {l} mean attention distance " + " ".join(f"{v:.3f}" for v in row))
    print(f"reports in {out}")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablation_driver

    cfg = _load(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}")
    rows = ablation_driver(args.suite, cfg, seeds, out=cfg.out)
    for r in rows:
        print(f"{r['dataset']}\t{r['variant']}\tseed={r['seed']}\tscale={r['scale']}\trank={r['rank']}\t"
              f"{r['metric']}={r['value']:.4f}\tparams={r['trainable_params']}\t"
              f"evals={r['expert_evals']}\tit/s={r['iter_per_sec']:.2f}")
    print(f"table in {Path(cfg.out) / (args.suite + '.csv')}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    worst = run_gradcheck(range(args.seed, args.seed + args.n_seeds))
    for name, err in worst.items():
        print(f"{name:20s} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    return 0 if all(e < TOLERANCE for e in worst.values()) else 1


def cmd_gen_data(args) -> int:
    from .data import gen_synthetic

    cfg = _load(args)
    ds = gen_synthetic(cfg.data, cfg.seed, args.split)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.split}.npz"
    np.savez_compressed(path, images=ds.images, labels=ds.labels, radii=np.array(ds.radii))
    (out / "data.cfg").write_text(dump_config(cfg))
    print(f"{len(ds)} images -> {path}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(e, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"convlora {args.command}: {e}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, FloatingPointError) as e:
        print(f"convlora {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
