"""Command-line entry point: ``deformwarp <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical divergence during training.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data_io
from .errors import (DegenerateGeometryError, IncompatibleCheckpointError, InvalidArgumentError,
                     InvalidStateError, PoseParseError, SingularTransformError, TrainingDivergedError)
from .gan import VARIANTS, GeneratorConfig, TrainConfig, build_variant
from .metrics import SsimConfig, mask_ssim, ssim
from .pose import Part, apply_symmetry_fallback, decompose_regions, heatmap_from_pose
from .synth import SyntheticFigureSpec, generate_dataset
from .training import (LOSS_FIELDS, TrainState, Trainer, config_dict, configs_from_dict, prepare_sample,
                       read_log, write_log)
from .warp import build_warp_plan, deform

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
THREADS_ENV = "DEFORMWARP_THREADS"


class UsageError(Exception):
    pass


# -- run configuration ------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything ``train`` needs. Generator and training fields sit next to the run keys."""

    variant: str = "full"
    manifest: str | None = None
    out_dir: str = "run"
    synthetic_pairs: int = 64
    data_seed: int = 100
    checkpoint_every: int = 500
    generator: GeneratorConfig = GeneratorConfig()
    train: TrainConfig = TrainConfig()

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        run_keys = {f.name for f in fields(cls)} - {"generator", "train"}
        g_keys = {f.name for f in fields(GeneratorConfig)}
        t_keys = {f.name for f in fields(TrainConfig)}
        for key in values:
            if key not in run_keys | g_keys | t_keys:
                raise UsageError(f"unknown config key: {key!r}")
        run = {k: v for k, v in values.items() if k in run_keys}
        variant = run.get("variant", cls.variant)
        overrides = {k: v for k, v in values.items() if k in g_keys | t_keys}
        for key in ("encoder", "decoder"):
            if key in overrides:
                overrides[key] = tuple(tuple(b) for b in overrides[key])
        try:
            g, t = build_variant(variant, **overrides)
        except (InvalidArgumentError, TypeError) as exc:
            raise UsageError(str(exc)) from exc
        return cls(**run, generator=g, train=t)


def load_run_config(path) -> dict:
    if sys.version_info >= (3, 11):
        import tomllib as toml
    else:
        import tomli as toml

    try:
        with open(path, "rb") as fh:
            return toml.load(fh)
    except toml.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc


# -- commands -----------------------------------------------------------------------

def cmd_heatmap(args) -> int:
    rec = data_io.read_pose_record(args.pose)
    stack = heatmap_from_pose(rec.pose, rec.width, rec.height, args.sigma, squared=args.squared)
    data_io.write_container(args.out, dict([("heatmaps", stack.maps), data_io.meta_entry(f"sigma{args.sigma:g}")]))
    return EXIT_OK


def cmd_warp(args) -> int:
    entries = data_io.read_container(args.features)
    if args.entry not in entries:
        raise IncompatibleCheckpointError(f"{args.features}: no entry named {args.entry!r}")
    F = entries[args.entry]
    if F.ndim != 3:
        raise InvalidArgumentError(f"entry {args.entry!r} must be (height, width, channels), got {F.shape}")
    rec_a = data_io.read_pose_record(args.pose_a)
    rec_b = data_io.read_pose_record(args.pose_b)
    size = (rec_a.height, rec_a.width)
    ra = decompose_regions(rec_a.pose, rec_a.width, rec_a.height)
    rb = decompose_regions(rec_b.pose, rec_b.width, rec_b.height)
    plan = build_warp_plan(ra, rb, size, F.shape[:2])

    fa = apply_symmetry_fallback(ra, rb)
    missing = [Part(h).name for h in range(len(Part)) if fa[h].empty or rb[h].empty]
    degenerate = [Part(h).name for h in range(len(Part))
                  if not (fa[h].empty or rb[h].empty) and plan.params[h] is None]
    if degenerate:
        raise DegenerateGeometryError(f"degenerate geometry for part(s): {', '.join(degenerate)}")
    if missing:
        print(f"warning: empty part(s) skipped: {', '.join(missing)}", file=sys.stderr)
    out, _ = deform(F, plan)
    data_io.write_container(args.out, {args.entry: out})
    return EXIT_OK


def _run_config(args) -> RunConfig:
    values = load_run_config(args.config) if args.config else {}
    for key, attr in (("variant", "variant"), ("iterations", "iters"), ("seed", "seed"),
                      ("out_dir", "out"), ("manifest", "manifest"), ("batch_size", "batch_size"),
                      ("checkpoint_every", "checkpoint_every"), ("synthetic_pairs", "pairs"),
                      ("lam", "lam")):
        val = getattr(args, attr, None)
        if val is not None:
            values[key] = val
    return RunConfig.from_mapping(values)


def _load_dataset(manifest, gcfg: GeneratorConfig, synthetic_pairs: int, data_seed: int):
    if manifest:
        samples = []
        for row in data_io.read_manifest(manifest):
            mask = data_io.read_mask_png(row.mask_b) if row.mask_b else None
            samples.append(prepare_sample(data_io.read_png(row.image_a), data_io.read_png(row.image_b),
                                          data_io.read_pose(row.pose_a), data_io.read_pose(row.pose_b),
                                          gcfg, mask_b=mask))
        if not samples:
            raise InvalidArgumentError(f"{manifest}: manifest has no rows")
        return samples
    spec = SyntheticFigureSpec(height=gcfg.height, width=gcfg.width)
    return [prepare_sample(p.x_a, p.x_b, p.pose_a, p.pose_b, gcfg, mask_b=p.mask_b)
            for p in generate_dataset(spec, synthetic_pairs, data_seed)]


def _save(path, state: TrainState, gcfg, tcfg, run: dict):
    cfg = config_dict(gcfg, tcfg)
    cfg["run"] = run
    data_io.save_checkpoint(path, {"G": state.g_params, "D": state.d_params}, cfg, state.iteration)


def cmd_train(args) -> int:
    if args.resume:
        stores, cfg, iteration = data_io.load_checkpoint(args.resume)
        gcfg, tcfg = configs_from_dict(cfg)
        run = dict(cfg.get("run", {}))
        if args.iters is not None:
            tcfg = dataclasses.replace(tcfg, iterations=args.iters)
        if args.out is not None:
            run["out_dir"] = args.out
        state = TrainState(stores["G"], stores["D"], iteration)
    else:
        rc = _run_config(args)
        gcfg, tcfg = rc.generator, rc.train
        run = {"variant": rc.variant, "manifest": rc.manifest, "out_dir": rc.out_dir,
               "synthetic_pairs": rc.synthetic_pairs, "data_seed": rc.data_seed,
               "checkpoint_every": rc.checkpoint_every}
        state = None
    if args.checkpoint_every is not None:
        run["checkpoint_every"] = args.checkpoint_every

    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.csv"
    trainer = Trainer(gcfg, tcfg)
    samples = _load_dataset(run.get("manifest"), gcfg, run["synthetic_pairs"], run["data_seed"])
    if state is None:
        state = trainer.init_state()
    elif log_path.is_file():
        state.trace = [r for r in read_log(log_path) if r["iteration"] < state.iteration]

    every = int(run["checkpoint_every"])

    def on_step(st, row):
        if every > 0 and st.iteration % every == 0:
            _save(out / f"checkpoint_{st.iteration:06d}.dwt", st, gcfg, tcfg, run)
            write_logs(st.trace)

    def write_logs(trace):
        write_log(log_path, trace)
        write_log(out / "losses.csv", trace, LOSS_FIELDS)

    try:
        trainer.train(state, samples, tcfg.iterations, on_step)
    finally:
        write_logs(state.trace)
    _save(out / "final.dwt", state, gcfg, tcfg, run)
    print(f"trained to iteration {state.iteration}; log {log_path}")
    return EXIT_OK


def _load_generator(checkpoint):
    stores, cfg, _ = data_io.load_checkpoint(checkpoint)
    gcfg, tcfg = configs_from_dict(cfg)
    return Trainer(gcfg, tcfg), stores["G"]


def _manifest_samples(rows, gcfg):
    return [prepare_sample(data_io.read_png(r.image_a), data_io.read_png(r.image_b),
                           data_io.read_pose(r.pose_a), data_io.read_pose(r.pose_b), gcfg)
            for r in rows]


def cmd_generate(args) -> int:
    trainer, g_params = _load_generator(args.checkpoint)
    gcfg = trainer.gcfg
    if args.manifest:
        rows = data_io.read_manifest(args.manifest)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        images = trainer.generate(g_params, _manifest_samples(rows, gcfg))
        for i, img in enumerate(images):
            data_io.write_png(out_dir / f"{i:05d}.png", img)
        return EXIT_OK
    if not (args.x_a and args.pose_a and args.pose_b):
        raise UsageError("generate needs X_A POSE_A POSE_B OUT, or --manifest with OUT as a directory")
    x_a = data_io.read_png(args.x_a)
    sample = prepare_sample(x_a, np.zeros_like(x_a), data_io.read_pose(args.pose_a),
                            data_io.read_pose(args.pose_b), gcfg)
    data_io.write_png(args.out, trainer.generate(g_params, [sample])[0])
    return EXIT_OK


def evaluate_rows(predictions, targets, masks) -> list[tuple[float, float]]:
    cfg = SsimConfig(dynamic_range=2.0)
    out = []
    for x, y, m in zip(predictions, targets, masks):
        if m is None:
            m = np.ones(y.shape[:2], dtype=np.uint8)
        out.append((ssim(x, y, cfg), mask_ssim(x, y, m, cfg)))
    return out


def cmd_eval(args) -> int:
    rows = data_io.read_manifest(args.manifest)
    targets = [data_io.read_png(r.image_b) for r in rows]
    masks = [data_io.read_mask_png(r.mask_b) if r.mask_b else None for r in rows]
    if args.checkpoint:
        trainer, g_params = _load_generator(args.checkpoint)
        preds = list(trainer.generate(g_params, _manifest_samples(rows, trainer.gcfg)).astype(np.float64))
    elif args.generated:
        preds = [data_io.read_png(Path(args.generated) / f"{i:05d}.png") for i in range(len(rows))]
    else:
        raise UsageError("eval needs --checkpoint or --generated")
    scores = evaluate_rows(preds, targets, masks)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "image_b", "ssim", "mask_ssim"])
        for i, (row, (s, m)) in enumerate(zip(rows, scores)):
            w.writerow([i, row.image_b.name, repr(s), repr(m)])
        if scores:
            w.writerow(["mean", "", repr(float(np.mean([s for s, _ in scores]))),
                        repr(float(np.mean([m for _, m in scores])))])
    return EXIT_OK


def cmd_synth(args) -> int:
    values = load_run_config(args.spec) if args.spec else {}
    known = {f.name for f in fields(SyntheticFigureSpec)}
    for key in values:
        if key not in known:
            raise UsageError(f"unknown synthetic spec key: {key!r}")
    for key in ("seed", "height", "width"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    spec = SyntheticFigureSpec(**values)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, pair in enumerate(generate_dataset(spec, args.count)):
        names = {k: out / f"{i:05d}_{k}" for k in ("a", "b")}
        data_io.write_png(names["a"].with_suffix(".png"), pair.x_a)
        data_io.write_png(names["b"].with_suffix(".png"), pair.x_b)
        data_io.write_pose(names["a"].with_suffix(".json"), pair.pose_a, spec.width, spec.height)
        data_io.write_pose(names["b"].with_suffix(".json"), pair.pose_b, spec.width, spec.height)
        mask = out / f"{i:05d}_b_mask.png"
        data_io.write_mask_png(mask, pair.mask_b)
        rows.append(data_io.ManifestRow(names["a"].with_suffix(".png"), names["a"].with_suffix(".json"),
                                        names["b"].with_suffix(".png"), names["b"].with_suffix(".json"), mask))
    data_io.write_manifest(out / "manifest.csv", rows)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformwarp", description="Pose-conditioned image generation with deformable skips.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("heatmap", help="render joint heat maps of a pose file")
    s.add_argument("pose")
    s.add_argument("out")
    s.add_argument("--sigma", type=float, default=6.0)
    s.add_argument("--squared", action="store_true", help="use the squared distance in the exponent")
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("warp", help="deform a stored (h, w, c) feature map from pose A to pose B")
    s.add_argument("features")
    s.add_argument("pose_a")
    s.add_argument("pose_b")
    s.add_argument("out")
    s.add_argument("--entry", default="features", help="container entry holding the feature map")
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("train", help="train a variant; TOML config keys are overridden by flags")
    s.add_argument("--config")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--manifest")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lam", type=float)
    s.add_argument("--pairs", type=int, help="synthetic pairs when no manifest is given")
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--resume", help="continue from a checkpoint written by an earlier run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="render x_a in pose B with a trained generator")
    s.add_argument("checkpoint")
    s.add_argument("x_a", nargs="?")
    s.add_argument("pose_a", nargs="?")
    s.add_argument("pose_b", nargs="?")
    s.add_argument("out")
    s.add_argument("--manifest", help="generate every row; OUT is then a directory")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", help="per-pair SSIM and mask-SSIM over a manifest")
    s.add_argument("manifest")
    s.add_argument("out")
    s.add_argument("--checkpoint")
    s.add_argument("--generated", help="directory of NNNNN.png predictions, one per manifest row")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic paired dataset and its manifest")
    s.add_argument("out_dir")
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--spec", help="TOML file of synthetic figure settings")
    s.add_argument("--seed", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.set_defaults(func=cmd_synth)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PoseParseError, IncompatibleCheckpointError, DegenerateGeometryError, SingularTransformError,
            InvalidArgumentError, InvalidStateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
