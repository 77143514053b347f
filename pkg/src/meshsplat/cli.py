"""Command-line front end: ``python -m meshsplat <subcommand> ...``.

Exit status is 0 on success, 1 for usage/config errors and 2 when a run fails.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .dmtet import ConfigError

log = logging.getLogger("meshsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _rgb(text: str):
    vals = [float(x) for x in text.split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected r,g,b")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshsplat", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-dataset", help="render a synthetic scene")
    s.add_argument("--shape", required=True, choices=("sphere", "torus", "cube", "blob"))
    s.add_argument("--views", type=int, default=24)
    s.add_argument("--res", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--albedo", type=_rgb, default=None, help="constant color r,g,b")
    s.add_argument("-o", "--out", required=True)

    def train_args(s):
        s.add_argument("-c", "--config", default=None, help="key = value config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        s.add_argument("--scene", default=None, help="dataset directory (overrides config)")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("-o", "--out", required=True)

    train_args(sub.add_parser("reconstruct", help="run the two-stage optimization"))
    s = sub.add_parser("ablate", help="sweep one knob and tabulate Chamfer")
    train_args(s)
    s.add_argument("--suite", required=True, choices=("layers", "dmtet_res", "edge_len"))
    s.add_argument("--samples", type=int, default=100000)

    s = sub.add_parser("render", help="render a mesh as softened layers")
    s.add_argument("--mesh", required=True)
    s.add_argument("--cameras", required=True, help="cameras.txt or a dataset directory")
    s.add_argument("--layers", type=int, default=5)
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--oracle", action="store_true", help="use the brute-force renderer")
    s.add_argument("--timing", default=None, help="write per-view stage timings CSV")
    s.add_argument("-o", "--out", required=True)

    s = sub.add_parser("eval", help="Chamfer distance between two meshes")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--samples", type=int, default=100000)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("report", help="summarize ablation CSVs")
    s.add_argument("csvs", nargs="+")
    s.add_argument("--scene", default="")
    s.add_argument("-o", "--out", default=None)
    return p


# ---------------------------------------------------------------- commands

def _resolve_train(args):
    from .train import TrainConfig, load_config, parse_overrides

    if args.config:
        cfg, extra = load_config(args.config)
    else:
        cfg, extra = TrainConfig(), {}
    fields_, more = parse_overrides(args.set, allowed_extra=("scene",))
    extra.update(more)
    if args.scene:
        extra["scene"] = args.scene
    if args.seed is not None:
        fields_["seed"] = args.seed
    cfg = cfg.replace(**fields_)
    if "scene" not in extra:
        raise ConfigError("no scene given (config key 'scene' or --scene)")
    return cfg, extra


def cmd_make_dataset(args) -> int:
    from .harness import make_dataset, save_dataset

    ds = make_dataset(args.shape, args.views, args.res, args.seed, albedo=args.albedo)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.views)} views to {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    from .harness import load_dataset
    from .train import save_config, train_loop

    cfg, extra = _resolve_train(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.resolved.txt", extra)
    ds = load_dataset(extra["scene"])
    res = train_loop(ds, cfg, out)
    print(f"final mesh: {res.mesh.n_vertices} vertices, {res.mesh.n_faces} faces -> "
          f"{out / 'final.obj'}")
    return 0


def cmd_ablate(args) -> int:
    from .harness import load_dataset, run_ablation
    from .train import save_config

    cfg, extra = _resolve_train(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.resolved.txt", extra)
    rows = run_ablation(args.suite, load_dataset(extra["scene"]), cfg, out, args.samples)
    for r in rows:
        print(f"{r['config']}: chamfer={r['chamfer']!r} verts={r['verts']}")
    return 0


def cmd_render(args) -> int:
    from .geometry import load_cameras, load_obj, write_ppm
    from .soften import AlphaParams, soften
    from .splat import oracle_render, render

    cams_path = Path(args.cameras)
    if cams_path.is_dir():
        cams_path = cams_path / "cameras.txt"
    mesh = load_obj(args.mesh)
    cams = load_cameras(cams_path)
    params = AlphaParams.from_beta(args.beta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "render_config.txt").write_text(
        f"mesh = {args.mesh}\ncameras = {cams_path}\nlayers = {args.layers}\n"
        f"delta = {args.delta!r}\nbeta = {args.beta!r}\nseed = {args.seed}\n"
        f"oracle = {args.oracle}\n")
    rng = np.random.default_rng(args.seed)
    rows = []
    for i, cam in enumerate(cams):
        layers = soften(mesh, args.layers, args.delta, params, rng)
        timings: dict = {}
        t0 = time.perf_counter()
        img = (oracle_render(layers, cam) if args.oracle
               else render(layers, cam, timings=timings))
        total = time.perf_counter() - t0
        write_ppm(out / f"render_{i:03d}.ppm", img.color)
        write_ppm(out / f"alpha_{i:03d}.ppm", img.opacity)
        rows.append([i, timings.get("bin", 0.0), timings.get("fragment", 0.0),
                     timings.get("composite", 0.0), total])
    if args.timing:
        with open(args.timing, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["view", "bin", "fragment", "composite", "total"])
            w.writerows(rows)
    print(f"rendered {len(cams)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    from .geometry import load_obj
    from .harness import mesh_chamfer

    cd = mesh_chamfer(load_obj(args.pred), load_obj(args.gt), args.samples, args.seed)
    print(f"chamfer={cd!r}")
    return 0


def cmd_report(args) -> int:
    from .harness import report

    text = report(args.csvs, args.scene)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


COMMANDS = {"make-dataset": cmd_make_dataset, "reconstruct": cmd_reconstruct,
            "ablate": cmd_ablate, "render": cmd_render, "eval": cmd_eval,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        import numba

        if args.threads < 1:
            print(f"{parser.prog}: error: --threads must be >= 1", file=sys.stderr)
            return 1
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"{parser.prog}: config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("run failed", exc_info=True)
        print(f"{parser.prog} {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())
