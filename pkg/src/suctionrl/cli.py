"""Command-line entry point: train, eval, matrix, render.

Exit codes: 0 success, 1 usage error (bad flags/config), 2 runtime failure.
Every command that takes --seed is bit-reproducible in its file outputs.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import agent as ag
from . import config as cfg_mod
from . import evalkit
from . import heightmap as hm
from . import qnet
from . import scene as sc

ENV_CHOICES = ("scattered",) + sc.ENV_KINDS


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise UsageError(message)


def _load_config(args) -> cfg_mod.RunConfig:
    if getattr(args, "preset", None):
        run = cfg_mod.preset(args.preset)
    elif getattr(args, "config", None):
        run = cfg_mod.parse(Path(args.config).read_text())
    else:
        run = cfg_mod.RunConfig()
    overrides = dict(kv.split("=", 1) for kv in getattr(args, "set", []) or [])
    if overrides:
        run = cfg_mod.apply_overrides(run, overrides)
    if getattr(args, "seed", None) is not None:
        run = cfg_mod.with_seed(run, args.seed)
    if getattr(args, "steps", None) is not None:
        run = replace(run, train=replace(run.train, steps=args.steps))
    return run


def _write_meta(out: Path, run: cfg_mod.RunConfig) -> None:
    (out / "config.ini").write_text(cfg_mod.serialize(run))
    (out / "meta.json").write_text(
        json.dumps({"config_digest": cfg_mod.digest(run)}, indent=2, sort_keys=True)
    )


def cmd_train(args) -> int:
    run = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, log = ag.train(
        run.train,
        plan=run.scene,
        percept=run.percept,
        arch=run.arch,
        reward_cfg=run.reward,
        height_policy=run.height_policy,
        fidelity=run.fidelity,
        geometry=run.geometry,
    )
    qnet.save_params(params, out / "checkpoint.sqnet")
    log.write_csv(out / "train_log.csv")
    _write_meta(out, run)
    print(f"trained {run.train.steps} steps -> {out / 'checkpoint.sqnet'}")
    return 0


def cmd_eval(args) -> int:
    run = _load_config(args)
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    params = qnet.load_params(checkpoint)
    report = evalkit.evaluate(
        params,
        args.env,
        args.fidelity,
        not args.no_height_policy,
        args.episodes,
        run.seed,
        plan=run.scene,
        percept=run.percept,
        geometry=run.geometry,
        strict_distance=run.eval.strict_distance,
        attempts_factor=run.eval.attempts_factor,
        config_digest=cfg_mod.digest(run),
        method="checkpoint",
    )
    if args.out:
        evalkit.emit_report([report], Path(args.out))
    print(
        json.dumps(
            {
                "s_r": report.s_r,
                "d_r": report.d_r,
                "collision_rate": report.collision_rate,
                "attempts": report.n_attempts,
            },
            sort_keys=True,
        )
    )
    return 0


def _matrix_text(spec_arg: str) -> str:
    path = Path(spec_arg)
    if path.exists():
        return path.read_text()
    bundled = resources.files("suctionrl.assets").joinpath(f"{spec_arg}.matrix")
    if bundled.is_file():
        return bundled.read_text()
    raise UsageError(f"matrix spec not found: {spec_arg} (bundled: table1, fig3)")


def cmd_matrix(args) -> int:
    spec = evalkit.parse_matrix(_matrix_text(args.spec))
    if args.dry_run:
        for seed in spec.seeds:
            for method, env in spec.cells():
                print(f"{method} env={env} fidelity={spec.eval_fidelity} seed={seed}")
        return 0
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    out = Path(args.out) / f"{spec.name}_{stamp}"
    reports = evalkit.run_matrix(spec, jobs=args.jobs)
    written = evalkit.emit_report(reports, out)
    for row in evalkit.aggregate_rows(reports):
        print(
            f"{row['method']:28s} {row['env']:26s} "
            f"S_r={row['s_r_mean']:6.2f} D_r={row['d_r_mean']:6.2f} "
            f"collisions={row['collision_rate_mean']:6.2f}"
        )
    print(f"wrote {len(written)} files under {out}")
    return 0


def cmd_render(args) -> int:
    run = _load_config(args)
    if args.scene:
        scene = sc.scene_from_json(Path(args.scene).read_text())
    elif args.env == "scattered":
        scene = sc.spawn_scattered(run.scene.object_count, run.scene.object_size, run.seed)
    else:
        scene = sc.spawn_environment(args.env, run.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    heightmap = hm.render_heightmaps(scene, run.percept.resolution)
    clutter = hm.action_mask(heightmap, run.percept, height_policy=True)
    hm.write_color_ppm(heightmap, out / "color.ppm")
    hm.write_depth_pgm(heightmap, out / "depth.pgm")
    hm.write_clutter_pgm(clutter, out / "clutter.pgm")
    hm.write_sidecar(heightmap, out / "heightmap.json")
    (out / "scene.json").write_text(sc.scene_to_json(scene))
    print(f"rendered {len(scene)} objects -> {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="suctionrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config file (key = value sections)")
        p.add_argument("--preset", help="named preset (paper-proposed, paper-baseline, desk-small)")
        p.add_argument("--seed", type=int, help="root seed for all randomness")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")

    p_train = sub.add_parser("train", help="run the training loop, write checkpoint + log")
    common(p_train)
    p_train.add_argument("--steps", type=int, help="override training step count")
    p_train.add_argument("--out", default="run", help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint, print metrics as JSON")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--env", choices=ENV_CHOICES, default="scattered")
    p_eval.add_argument("--fidelity", choices=("sim", "real"), default="sim")
    p_eval.add_argument("--episodes", type=int, default=5)
    p_eval.add_argument("--no-height-policy", action="store_true")
    p_eval.add_argument("--out", help="optional report directory")
    p_eval.set_defaults(func=cmd_eval)

    p_matrix = sub.add_parser("matrix", help="run an experiment matrix spec")
    p_matrix.add_argument("--spec", required=True, help="matrix file path or bundled name")
    p_matrix.add_argument("--out", default="runs")
    p_matrix.add_argument("--jobs", type=int, default=1)
    p_matrix.add_argument("--dry-run", action="store_true")
    p_matrix.set_defaults(func=cmd_matrix)

    p_render = sub.add_parser("render", help="dump heightmaps and clutter mask for a scene")
    common(p_render)
    p_render.add_argument("--scene", help="scene JSON file")
    p_render.add_argument("--env", choices=ENV_CHOICES, default="scattered")
    p_render.add_argument("--out", default="render")
    p_render.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
