"""Command-line entry point: ``flowrestore <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 I/O, 3 configuration, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import degrade, nn
from . import tensor as T
from .config import RunConfig
from .data import ClipRecord, discover_clips, load_image, save_image, write_manifest, write_synthetic_clips
from .errors import ConfigError, FormatError, NumericalError
from .flow import FieldToggles, SolverSettings, export_trace, restore_frame, to_image
from .train import TrainState, evaluate, load_checkpoint, train

EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 1, 2, 3, 4

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--toggles", help="preset (%s) or comma list of momentum,potential,decay,prompt" % ", ".join(FieldToggles.PRESETS))
    g.add_argument("--steps", type=int, help="number of Euler steps T")
    g.add_argument("--dt", type=float, help="Euler step size")
    g.add_argument("--tdt", type=float, help="total horizon T*dt; sets dt = tdt / T")
    g.add_argument("--decay-rate", type=float, help="decay rate of the potential term")


def _solver_from(args, base: SolverSettings) -> SolverSettings:
    steps = args.steps if args.steps is not None else base.steps
    dt = args.dt if args.dt is not None else base.dt
    if args.tdt is not None:
        if args.dt is not None:
            raise ConfigError("give either --dt or --tdt, not both")
        dt = args.tdt / steps
    rate = args.decay_rate if args.decay_rate is not None else base.decay_rate
    return SolverSettings(steps=steps, dt=dt, decay_rate=rate)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for flag, key in (
        ("iterations", "train__iterations"),
        ("lr", "train__lr"),
        ("batch_size", "train__batch_size"),
        ("crop", "train__crop"),
        ("seed", "train__seed"),
        ("val_every", "train__val_every"),
        ("levels", "arch__levels"),
        ("base_channels", "arch__base_channels"),
        ("prompt_dim", "arch__prompt_dim"),
        ("prompt_mode", "arch__prompt_mode"),
    ):
        overrides[key] = getattr(args, flag, None)
    if hasattr(args, "toggles"):
        overrides["toggles__"] = args.toggles
        cfg = cfg.with_overrides(**overrides)
        solver = _solver_from(args, cfg.solver)
        cfg = cfg.with_overrides(solver__steps=solver.steps, solver__dt=solver.dt, solver__decay_rate=solver.decay_rate)
    else:
        cfg = cfg.with_overrides(**overrides)
    if getattr(args, "mix_config", None):
        cfg.mix = _load_mix(args.mix_config)
    return cfg


def _load_mix(path) -> degrade.MixtureConfig:
    try:
        return degrade.MixtureConfig.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _state_with(args, state: TrainState) -> TrainState:
    from dataclasses import replace

    toggles = FieldToggles.parse(args.toggles) if args.toggles else state.config.toggles
    solver = _solver_from(args, state.config.solver)
    return replace(state, config=replace(state.config, solver=solver, toggles=toggles))


# ---------------------------------------------------------------- subcommands


def cmd_synth_clean(args) -> int:
    dirs = write_synthetic_clips(args.out_dir, args.clips, args.frames, args.size, args.seed)
    print(f"wrote {len(dirs)} clips x {args.frames} frames to {args.out_dir}")
    return 0


def _split_plan(n: int, fractions: list[float], rng: np.random.Generator) -> list[str]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) <= 0:
        raise ConfigError("--split takes three non-negative fractions train,val,test")
    total = sum(fractions)
    n_val = int(round(n * fractions[1] / total))
    n_test = int(round(n * fractions[2] / total))
    n_train = max(n - n_val - n_test, 1 if n else 0)
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    labels = labels[:n]
    return [labels[i] for i in np.argsort(rng.permutation(n), kind="stable")]


def cmd_gen_data(args) -> int:
    mix = _load_mix(args.mix_config) if args.mix_config else degrade.MixtureConfig()
    mix.seed = args.seed
    clips = discover_clips(args.clean_dir)
    if not clips:
        raise ConfigError(f"no input frames in {args.clean_dir}")
    manifest_path = Path(args.out_manifest)
    root = manifest_path.parent
    out_dir = Path(args.out_dir) if args.out_dir else root / "degraded"
    fractions = [float(v) for v in args.split.split(",")]
    splits = _split_plan(len(clips), fractions, np.random.default_rng([args.seed, 1]))
    records = []
    index = 0
    for (clip_id, frames), split in zip(clips, splits):
        clip_out = out_dir / clip_id
        clip_out.mkdir(parents=True, exist_ok=True)
        rel_frames, rel_deg, specs = [], [], []
        for f in frames:
            spec = degrade.spec_at(mix, index)
            index += 1
            degraded = degrade.apply(spec, load_image(f))
            target = clip_out / (f.stem + ".ppm")
            save_image(degraded, target)
            rel_frames.append(os.path.relpath(f, root))
            rel_deg.append(os.path.relpath(target, root))
            specs.append(spec.to_dict())
        records.append(ClipRecord(clip_id, rel_frames, args.fps, split, rel_deg, specs))
    write_manifest(records, manifest_path)
    print(f"wrote {index} degraded frames in {len(records)} clips; manifest {manifest_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(cfg.to_json())
    res = train(args.manifest, cfg.mix, cfg.train, cfg.arch, out_dir=out)
    last = res.curve[-1] if res.curve else None
    print(f"trained {res.state.iteration} iterations; last l1 {last[1]:.6f}" if last else "no iterations run")
    print(f"checkpoints: {res.last_path} {res.best_path}")
    return 0


def cmd_restore(args) -> int:
    state = _state_with(args, load_checkpoint(args.checkpoint))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        for path in args.inputs:
            x = load_image(path)
            y, _ = restore_frame(x, state.params, state.arch, state.config.solver, state.config.toggles)
            target = out / (Path(path).stem + ".ppm")
            save_image(to_image(y), target)
            print(target)
    return 0


def cmd_eval(args) -> int:
    state = _state_with(args, load_checkpoint(args.checkpoint))
    mix = _load_mix(args.mix_config) if args.mix_config else degrade.MixtureConfig()
    report = evaluate(state, args.manifest, split=args.split, mix=mix, csv_path=args.out)
    for task, agg in sorted(report.by_task().items()):
        print(
            f"{task:16s} n={agg['frames']:4d}  psnr {agg['psnr_in']:.3f} -> {agg['psnr_out']:.3f}  "
            f"ssim {agg['ssim_in']:.4f} -> {agg['ssim_out']:.4f}"
        )
    return 0


def cmd_dump_flow(args) -> int:
    state = _state_with(args, load_checkpoint(args.checkpoint))
    x = load_image(args.input)
    target = load_image(args.target) if args.target else None
    with T.no_grad():
        _, trace = restore_frame(
            x, state.params, state.arch, state.config.solver, state.config.toggles, capture=True, target=target
        )
    for p in export_trace(trace, args.out_dir):
        print(p)
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        arch, params, solver = state.arch, state.params, state.config.solver
    else:
        cfg = _run_config(args)
        arch, solver = cfg.arch, cfg.solver
        params = nn.init_params(arch, np.random.default_rng(0))
    count, macs = nn.count_params_macs(params, arch, args.height, args.width, steps=solver.steps)
    print(f"architecture: {json.dumps(arch.to_dict(), sort_keys=True)}")
    print(f"solver: steps={solver.steps} dt={solver.dt} decay_rate={solver.decay_rate}")
    print(f"parameters: {count}")
    print(f"macs_per_frame ({args.height}x{args.width}): {macs}")
    if args.verbose:
        print("parameter tensors:")
        for name, p in params.items():
            print(f"  {name:24s} {str(tuple(p.shape)):20s} {p.size}")
        print("layer MACs:")
        for name, m in nn.layer_macs(arch, args.height, args.width, solver.steps):
            print(f"  {name:24s} {m}")
    return 0


def cmd_print_config(args) -> int:
    sys.stdout.write(_run_config(args).to_json())
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowrestore", description="Prompt-guided flow restoration of video frames.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-clean", help="write procedurally generated clean clips")
    p.add_argument("--out-dir", required=True, help="directory that receives clipNNN/fNNN.ppm")
    p.add_argument("--clips", type=int, default=20, help="number of clips (default 20)")
    p.add_argument("--frames", type=int, default=10, help="frames per clip (default 10)")
    p.add_argument("--size", type=int, default=64, help="frame side in pixels (default 64)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.set_defaults(func=cmd_synth_clean)

    p = sub.add_parser("gen-data", help="degrade clean frames and write a JSON-lines manifest")
    p.add_argument("--clean-dir", required=True, help="clean frames; each subdirectory is one clip")
    p.add_argument("--out-manifest", required=True, help="manifest path to write")
    p.add_argument("--out-dir", help="degraded frame directory (default: <manifest dir>/degraded)")
    p.add_argument("--mix-config", help="JSON mixture config (weights, kinds, ranges)")
    p.add_argument("--seed", type=int, default=0, help="master seed for degradation draws (default 0)")
    p.add_argument("--fps", type=int, default=10, help="frame rate recorded for every clip (default 10)")
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test clip fractions (default 0.8,0.1,0.1)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p.add_argument("--out-dir", required=True, help="checkpoint and curve directory")
    p.add_argument("--config", help="run config JSON (flags override it)")
    p.add_argument("--mix-config", help="mixture config JSON, replaces the config's mix section")
    p.add_argument("--iterations", type=int, help="optimisation steps")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int, help="frames per step")
    p.add_argument("--crop", type=int, help="training crop size")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--val-every", type=int, help="validation period in iterations")
    p.add_argument("--levels", type=int, help="U-Net levels")
    p.add_argument("--base-channels", type=int, help="channels at the top level")
    p.add_argument("--prompt-dim", type=int, help="prompt width d")
    p.add_argument("--prompt-mode", choices=["literal", "pool_late"], help="prompt generator variant")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore image files with a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file (.ufr)")
    p.add_argument("--out-dir", required=True, help="directory for restored PPMs")
    p.add_argument("inputs", nargs="+", help="input images (PPM, or PNG with Pillow)")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="per-frame PSNR/SSIM report on a manifest split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file (.ufr)")
    p.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to evaluate (default test)")
    p.add_argument("--mix-config", help="mixture for clips without embedded specs")
    p.add_argument("--out", required=True, help="CSV report path")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-flow", help="write per-step images and a trace CSV for one frame")
    p.add_argument("--checkpoint", required=True, help="checkpoint file (.ufr)")
    p.add_argument("--input", required=True, help="degraded frame")
    p.add_argument("--target", help="clean frame, enables the l1_to_gt column")
    p.add_argument("--out-dir", required=True, help="output directory")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_dump_flow)

    p = sub.add_parser("inspect", help="parameter count, per-frame MACs and architecture")
    p.add_argument("--checkpoint", help="checkpoint to inspect (default: config / reference config)")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--height", type=int, default=64, help="frame height for MAC counting (default 64)")
    p.add_argument("--width", type=int, default=64, help="frame width for MAC counting (default 64)")
    p.add_argument("--levels", type=int, help="U-Net levels")
    p.add_argument("--base-channels", type=int, help="channels at the top level")
    p.add_argument("--prompt-dim", type=int, help="prompt width d")
    p.add_argument("--prompt-mode", choices=["literal", "pool_late"], help="prompt generator variant")
    p.add_argument("-v", "--verbose", action="store_true", help="list every parameter tensor")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("print-config", help="echo the effective run config as JSON")
    p.add_argument("--config", help="run config JSON to load")
    p.set_defaults(func=cmd_print_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
