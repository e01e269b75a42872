"""Command line entry point: ``memseg <subcommand> ...``.

Every failure is reported as one stderr line ``error: <Type>: <message>`` with
exit status 1.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from . import gradcheck
from . import scenes as sc
from .training import TrainConfig, fit


def _csv(kind):
    def parse(text: str):
        try:
            return tuple(kind(x) for x in text.split(",") if x.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None

    return parse


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _data_file(path: str, name: str) -> Path:
    p = Path(path)
    return p / name if p.is_dir() else p


def cmd_gen_data(args) -> None:
    seed = 0 if args.seed is None else args.seed
    params = sc.SceneParams(height=args.size, width=args.size, seed=seed)
    train, test = sc.make_split(args.out, counts=tuple(args.counts), seed=seed, params=params)
    print(f"wrote {train} and {test}")


def cmd_train(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    res = fit(cfg, _data_file(args.data, "train.sgpk"), out, resume_from=args.resume)
    print(f"trained {res.epochs_done} epochs; checkpoint {res.checkpoint}")


def cmd_eval(args) -> None:
    rep = ev.evaluate(args.checkpoint, _data_file(args.data, "test.sgpk"), args.out)
    print(f"miou {rep.miou!r}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    data = Path(args.data)
    values = args.values or ev.default_values(args.param, cfg.n_classes)
    seeds = args.seeds or (cfg.seed,)
    rep = ev.ablate(args.param, values, seeds, cfg, data / "train.sgpk", data / "test.sgpk", args.out)
    for v, n, mean, sd in rep.summary():
        print(f"{args.param}={v} n={n} miou={mean:.4f} sd={sd:.4f}")


def cmd_gradcheck(args) -> None:
    results = gradcheck.run_all(0 if args.seed is None else args.seed)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<32} {r.error:.3e} (tol {r.tol:g})")
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise AssertionError(f"gradient check failed for {', '.join(failed)}")


def cmd_inspect_bank(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    S, mean_off = ev.bank_similarity(args.checkpoint, heatmap=out / "bank_similarity.pgm")
    with open(out / "bank_similarity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item"] + [f"item_{k}" for k in range(S.shape[0])])
        for j, row in enumerate(S):
            w.writerow([j, *map(repr, row.tolist())])
    print(f"mean off-diagonal similarity {mean_off!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train.sgpk / test.sgpk with an illumination shift")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--counts", type=_csv(int), default=(256, 64), help="train,test sample counts")
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="train.sgpk or the directory holding it")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mIoU of a checkpoint on a test file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="test.sgpk or the directory holding it")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep K or beta over seeds")
    a.add_argument("--param", required=True, choices=sorted(ev.SWEEPABLE))
    a.add_argument("--values", type=_csv(float))
    a.add_argument("--seeds", type=_csv(int))
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--data", required=True, help="directory with train.sgpk and test.sgpk")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the micro model")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("inspect-bank", help="item similarity matrix and heatmap")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_inspect_bank)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "param", None) == "K" and args.values:
        args.values = tuple(int(v) for v in args.values)
    try:
        args.func(args)
    except Exception as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
