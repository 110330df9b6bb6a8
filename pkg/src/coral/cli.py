"""``coral`` command line: gen-data, build-map, render-elev, train, evaluate, query.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import CoralError, DataError, config
from .elevation import read_map, render_elevation_image, write_map, write_pgm
from .network import VARIANTS, ArchConfig, build_model
from .pipeline import load_dataset
from .retrieval import (DescriptorDatabase, evaluate_cross_run, query, read_database, summary_line,
                        write_database, write_report_csv)
from .synthetic import make_dataset
from .tensor_nn import load_checkpoint, load_state
from .training import MiningRules, TrainSettings, loss_reduction, mine_tuples, train

log = logging.getLogger("coral")


class UsageError(CoralError):
    exit_code = 1


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message} (see '{self.prog} --help')")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--preset", choices=sorted(config.PRESETS), default="desk")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", required=out_required, help="output directory (file for render-elev)")


def build_parser() -> Parser:
    parser = Parser(prog="coral", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)

    p = sub.add_parser("build-map", help="elevation map and PGM for every sample")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--dump-table", action="store_true", help="also write each projection table as text")

    p = sub.add_parser("render-elev", help="render a PGM from one map file")
    _common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--window", help="height window lo,hi in meters, written --window=lo,hi when lo is negative "
                   "(default: around the map's median height)")

    p = sub.add_parser("train", help="train a descriptor network")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS), help="architecture shorthand")

    p = sub.add_parser("evaluate", help="cross-run recall on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("query", help="top-k database ids for one sample")
    _common(p, out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--database", required=True, help="DESC file written by evaluate")
    p.add_argument("--id", type=int, required=True)
    p.add_argument("-k", type=int, default=1)
    return parser


def resolve_config(args, beside: Path | None = None) -> config.Config:
    """Preset, then a config file (``--config``, else ``config.cfg`` in ``beside``),
    then ``--set`` pairs, then ``--seed``."""
    path = args.config
    if path is None and beside is not None and (beside / "config.cfg").is_file():
        path = beside / "config.cfg"
    cfg = config.load(path, args.preset)
    if args.set:
        cfg.update(config.parse_text("\n".join(args.set), "--set"))
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _mkdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from None
    return out


def _model_for(cfg, checkpoint) -> torch.nn.Module:
    model = build_model(ArchConfig.from_config(cfg), cfg["seed"])
    try:
        load_state(model, load_checkpoint(checkpoint))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{checkpoint} does not fit the configured architecture: {exc}") from None
    return model


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = _mkdir(args.out)
    metas = make_dataset(out, cfg)
    (out / "config.cfg").write_text(cfg.dumps())
    print(f"wrote {len(metas)} samples ({cfg['n_places']} places x {cfg['revisits']} runs) to {out}")
    return 0


def cmd_build_map(args) -> int:
    cfg = resolve_config(args, Path(args.data))
    out = _mkdir(args.out)
    samples = load_dataset(args.data, cfg)
    for s in samples:
        write_map(out / f"{s.id:06d}.emap", s.emap)
        write_pgm(out / f"{s.id:06d}.pgm", s.elevation)
        if args.dump_table:
            (out / f"{s.id:06d}.table.txt").write_text(s.table.dumps())
    valid = np.mean([s.emap.valid.mean() for s in samples]) if samples else 0.0
    print(f"built {len(samples)} maps in {out} (mean valid fraction {valid:.3f})")
    return 0


def cmd_render_elev(args) -> int:
    cfg = resolve_config(args)
    emap = read_map(args.map)
    if args.window:
        try:
            lo, hi = (float(v) for v in args.window.split(","))
        except ValueError:
            raise UsageError(f"--window expects lo,hi, got {args.window!r}") from None
    else:
        if not emap.valid.any():
            raise DataError(f"{args.map} has no valid cells; pass --window")
        mid = float(np.median(emap.elevation[emap.valid]))
        lo, hi = mid - cfg["height_window"], mid + cfg["height_window"]
    try:
        image = render_elevation_image(emap, (lo, hi), cfg["fill_min_neighbors"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_pgm(args.out, image)
    print(f"wrote {args.out} window={lo!r},{hi!r}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args, Path(args.data))
    if args.variant:
        cfg.update(VARIANTS[args.variant])
    out = _mkdir(args.out)
    samples = load_dataset(args.data, cfg)
    tuples = mine_tuples([s.meta for s in samples], MiningRules.from_config(cfg),
                         np.random.default_rng([cfg["seed"], 10]))
    model = build_model(ArchConfig.from_config(cfg), cfg["seed"])
    (out / "config.cfg").write_text(cfg.dumps())
    result = train(model, {s.id: s for s in samples}, tuples, TrainSettings.from_config(cfg), out)
    first, last = loss_reduction(result.losses, len(tuples))
    print(f"trained {len(result.rows)} steps on {len(tuples)} tuples: "
          f"mean loss first epoch {first:.6f}, last epoch {last:.6f}; checkpoint {out / 'final.ckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = resolve_config(args, ckpt.parent)
    out = _mkdir(args.out)
    samples = load_dataset(args.data, cfg)
    model = _model_for(cfg, ckpt)
    desc = model.describe(samples)
    db = DescriptorDatabase([s.id for s in samples], [s.meta.run for s in samples],
                            [(s.meta.x, s.meta.y) for s in samples], desc)
    report = evaluate_cross_run(db, cfg["eval_radius"], cfg["recall_percent"], use_kdtree=cfg["use_kdtree"])
    write_database(out / "descriptors.desc", db)
    write_report_csv(out / "report.csv", report)
    print(summary_line(report))
    return 0


def cmd_query(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = resolve_config(args, ckpt.parent)
    if args.k < 1:
        raise UsageError("-k must be at least 1")
    db = read_database(args.database)
    samples = load_dataset(args.data, cfg, ids=[args.id])
    if not samples:
        raise DataError(f"sample {args.id} is not in {args.data}")
    desc = _model_for(cfg, ckpt).describe(samples)[0]
    res = query(db, desc, args.k, query_id=args.id, use_kdtree=cfg["use_kdtree"])
    for rank, (i, d) in enumerate(zip(res.ids, res.distances), 1):
        print(f"{rank} {int(i)} {float(d):.6f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-map": cmd_build_map,
    "render-elev": cmd_render_elev,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "query": cmd_query,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        torch.set_num_threads(1)  # single-threaded runs are bit-reproducible
        return COMMANDS[args.command](args)
    except CoralError as exc:
        print(f"coral: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
