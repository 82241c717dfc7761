"""Command-line entry point: gen, train, eval, sweep, dump.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .compression import RATIOS
from .config import RunConfig, resolve_config
from .eval import ABLATIONS, ablated, evaluate, fit_compression_adapters, sweep_compression
from .him import dump_heatmaps
from .model import forward, init_params, load_params, prepare_scene
from .params import load_checkpoint, save_checkpoint
from .scenesim import generate_scene, scene_from_json
from .train import TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def scene_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th scene of a generation run."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def read_scenes(path) -> list:
    p = Path(path)
    files = [p] if p.is_file() else sorted(p.glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no scene files in {path}")
    return [scene_from_json(f.read_text()) for f in files]


def _config(args) -> RunConfig:
    cfg = resolve_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_gen(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        scene = generate_scene(scene_seed(args.seed, i), cfg.scene)
        (out / f"scene_{args.seed}_{i}.json").write_text(scene.to_json())
    return EXIT_OK


def cmd_train(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    cfg = _config(args)
    if args.lr is not None:
        cfg = cfg.replace(train=type(cfg.train)(**{**cfg.train.__dict__, "lr": args.lr}))
    scenes = read_scenes(args.scenes)
    ps = init_params(cfg)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    with open(log_path, "w") as log:
        train(ps, scenes, cfg, args.steps, log=log)
    save_checkpoint(args.out, ps)
    return EXIT_OK


def _load(args, cfg: RunConfig):
    return load_params(load_checkpoint(args.ckpt), cfg)


def cmd_eval(args) -> int:
    cfg = ablated(_config(args), args.ablate)
    if args.no_collab:
        cfg = cfg.replace(collaboration=False)
    ps = _load(args, cfg)
    report = evaluate(ps, read_scenes(args.scenes), cfg, jobs=args.jobs)
    report.save(args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ratios = [int(r) for r in args.ratios.split(",") if r.strip()]
    bad = [r for r in ratios if r not in RATIOS]
    if bad:
        raise UsageError(f"unsupported ratios {bad}; choose from {list(RATIOS)}")
    ps = _load(args, cfg.replace(compression_ratio=1))
    scenes = read_scenes(args.scenes)
    fit_compression_adapters(ps, read_scenes(args.fit_scenes) if args.fit_scenes else scenes, cfg, ratios)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep_compression(ps, scenes, cfg, ratios, out / "sweep.csv", out / "sweep_plot.json", jobs=args.jobs)
    return EXIT_OK


def cmd_dump(args) -> int:
    cfg = _config(args)
    ps = _load(args, cfg)
    scene = prepare_scene(read_scenes(args.scene)[0])
    out = forward(scene, ps, cfg, mode="infer")
    if not out.stages:
        raise RuntimeError("heatmap dump needs the mining module enabled")
    dump_heatmaps(out.stages, out.agent_ids, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="collabdet", description="Collaborative BEV detection toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=False):
        sp.add_argument("--config", default=None, help="preset (default, micro, toy) or JSON config path")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    g = sub.add_parser("gen", help="generate synthetic scenes")
    common(g)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="SGD training on a scene directory")
    common(t, seed=True)
    t.add_argument("--scenes", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--log", default=None, help="JSON-lines loss log (default: <out>.log.jsonl)")
    t.add_argument("--lr", type=float, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--ablate", choices=ABLATIONS, default="none")
    e.add_argument("--no-collab", action="store_true", help="ego-only inference")
    e.add_argument("--out", default="report.json")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="compression ratio sweep")
    common(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--ratios", default=",".join(str(r) for r in RATIOS))
    s.add_argument("--fit-scenes", default=None, help="scenes used to fit missing adapters")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("dump", help="write per-stage heatmaps as PGM images")
    common(d)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--scene", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"collabdet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"collabdet: training aborted at step {exc.step}: non-finite loss", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"collabdet: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
