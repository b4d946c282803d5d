"""Batch command line around the library: inference, benchmarks, metrics,
gradient checks, overfit training, and attention-map export.

Every command writes its outputs plus one ``manifest.json`` into the
directory given by ``--out``.  Numbers printed or written as text carry 17
significant digits so they round-trip float64 exactly.  Exit codes:

  0  success
  1  command ran but its success condition failed
  2  argument, file, or config parse error
  3  invariant violation (bad shapes, joint index, model mismatch)
  4  memory budget exceeded
  5  not enough sweep points for a fit
  6  gradient check failure
  7  training diverged
  8  no training performed (steps=0)

Each failure prints exactly one diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import __version__, container
from .attention import record_attention
from .bench import (
    DEFAULT_SWEEP,
    VARIANTS,
    InsufficientDataError,
    MemoryBudgetError,
    attention_kl_diffuseness,
    compare_default_pyramid,
    run_scaling_sweep,
    scaling_exponents,
    write_loglog_csv,
    write_reports_csv,
    write_slopes_csv,
)
from .body import (
    InvariantError,
    project_weak_perspective,
    regress_joints,
    smpl_forward,
    synthesize_toy_model,
)
from .figures import (
    attention_panel_figure,
    loss_curve_figure,
    scaling_figure,
    write_pgm,
)
from .metrics import mpjpe, mpre, mpve, pa_mpjpe
from .network import (
    ModelConfig,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import gradcheck as gradcheck_mod
from .numerics import so3_log
from .numerics import tensor as T
from .numerics.gradcheck import grad_check_params, standard_op_checks
from .training import (
    DivergenceError,
    evaluate_metrics,
    make_synthetic_samples,
    sample_loss,
    train_overfit,
)

EXIT_OK = 0
EXIT_UNMET = 1
EXIT_PARSE = 2
EXIT_INVARIANT = 3
EXIT_MEMORY = 4
EXIT_FIT = 5
EXIT_GRADCHECK = 6
EXIT_DIVERGED = 7
EXIT_NO_TRAINING = 8

GRAD_TOLERANCE = 1e-4
_PRESETS = {
    "default": ModelConfig,
    "toy": ModelConfig.toy,
    "tiny": ModelConfig.tiny,
}


def f17(x) -> str:
    return format(float(x), ".17g")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """Argparse that fails with one stderr line and exit code 2."""

    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_PARSE)


# ---------------------------------------------------------------------------
# shared plumbing


def parse_config_file(path: Path) -> dict[str, str]:
    """key=value per line; blank lines and # comments allowed."""
    overrides = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_PARSE, f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(EXIT_PARSE, f"config line {lineno} is not key=value: {raw!r}")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def resolve_config(overrides: dict[str, str], default_preset: str = "toy") -> ModelConfig:
    overrides = dict(overrides)
    preset = overrides.pop("preset", default_preset)
    if preset not in _PRESETS:
        raise CliError(EXIT_PARSE, f"unknown preset {preset!r}; use default, toy, or tiny")
    base = _PRESETS[preset]()
    values = {f.name: getattr(base, f.name) for f in dataclass_fields(ModelConfig)}
    for key, raw in overrides.items():
        if key not in values:
            raise CliError(EXIT_PARSE, f"unknown config key {key!r}")
        try:
            values[key] = int(raw)
        except ValueError as exc:
            raise CliError(EXIT_PARSE, f"config key {key} needs an integer, got {raw!r}") from exc
    try:
        return ModelConfig(**values)
    except ValueError as exc:
        raise CliError(EXIT_INVARIANT, f"invalid config: {exc}") from exc


def load_input_image(args, config: ModelConfig, inputs: list) -> np.ndarray:
    size = config.image_size
    if getattr(args, "input_file", None):
        fields = container.read(args.input_file)
        if "image" not in fields:
            raise CliError(EXIT_PARSE, f"{args.input_file} has no 'image' field")
        image = fields["image"]
        if image.shape != (size, size):
            raise CliError(
                EXIT_INVARIANT,
                f"image shape {image.shape} does not match model input {(size, size)}",
            )
        inputs.append(str(args.input_file))
        return image
    seed = args.input_seed if getattr(args, "input_seed", None) is not None else args.seed
    inputs.append(f"seed:{seed}")
    return np.random.default_rng(seed).normal(size=(size, size))


def _config_dict(config: ModelConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in dataclass_fields(ModelConfig)}


def write_csv(path: Path, header: list[str], rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_forward(args, out: Path, ctx: dict) -> int:
    model = load_checkpoint(args.model)
    ctx["inputs"].append(str(args.model))
    ctx["config"] = _config_dict(model.config)
    image = load_input_image(args, model.config, ctx["inputs"])

    with record_attention() as records:
        result = forward(model, image, tag="fwd")

    for k, params in enumerate(result.snapshots):
        rotations = params.rotation_stack()
        container.write(out / f"params_{k}.tnsr", {
            "rotations": rotations,
            "axis_angle": np.stack([so3_log(r) for r in params.rotations]),
            "beta": params.beta,
            "camera": params.camera,
        })
        vertices = smpl_forward(model.body, params)
        joints3d = regress_joints(model.body, vertices)
        joints2d = project_weak_perspective(joints3d, params.camera)
        container.write(out / f"geometry_{k}.tnsr", {
            "vertices": vertices,
            "joints3d": joints3d,
            "joints2d": joints2d,
        })
        ctx["outputs"] += [f"params_{k}.tnsr", f"geometry_{k}.tnsr"]

    container.write(out / "attention.tnsr",
                    {rec.tag: rec.weights for rec in records})
    ctx["outputs"].append("attention.tnsr")
    print(f"wrote {len(result.snapshots)} parameter snapshots to {out}")
    return EXIT_OK


def cmd_bench(args, out: Path, ctx: dict) -> int:
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    for v in variants:
        if v not in VARIANTS:
            raise CliError(EXIT_PARSE, f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    if not variants:
        raise CliError(EXIT_PARSE, "no variants given")
    try:
        sweep = tuple(int(s) for s in args.sweep.split(",") if s.strip())
    except ValueError as exc:
        raise CliError(EXIT_PARSE, f"bad sweep value: {exc}") from exc
    ctx["config"] = {"variants": list(variants), "sweep": list(sweep),
                     "l_t": args.l_t, "d": args.d, "heads": args.heads,
                     "trials": args.trials}

    reports = run_scaling_sweep(variants, sweep, l_t=args.l_t, d=args.d,
                                heads=args.heads, trials=args.trials,
                                seed=args.seed, budget_mb=args.memory_budget_mb)
    fits = scaling_exponents(reports)
    comparison = compare_default_pyramid(seed=args.seed) if args.pyramid else None

    write_reports_csv(out / "reports.csv", reports)
    write_loglog_csv(out / "loglog.csv", fits)
    write_slopes_csv(out / "slopes.csv", fits, comparison)
    scaling_figure(out / "scaling.png", fits)
    ctx["outputs"] += ["reports.csv", "loglog.csv", "slopes.csv", "scaling.png"]

    for name, fit in fits.items():
        print(f"slope_{name} {f17(fit.slope)}")
    if comparison is not None:
        print(f"pyramid_ratio {f17(comparison.ratio)}")
    return EXIT_OK


_METRIC_FIELDS = ("joints3d", "vertices", "rotations")


def _metric_payload(path) -> dict[str, np.ndarray]:
    fields = container.read(path)
    for name in _METRIC_FIELDS:
        if name not in fields:
            raise CliError(EXIT_PARSE, f"{path} is missing field {name!r}")
    rot = fields["rotations"]
    if rot.ndim != 3 or rot.shape[1:] != (3, 3):
        raise CliError(EXIT_PARSE, f"{path} rotations must be (H, 3, 3), got {rot.shape}")
    return fields


def cmd_metrics(args, out: Path, ctx: dict) -> int:
    pred = _metric_payload(args.pred)
    true = _metric_payload(args.gt)
    ctx["inputs"] += [str(args.pred), str(args.gt)]
    for name in _METRIC_FIELDS:
        if pred[name].shape != true[name].shape:
            raise CliError(
                EXIT_INVARIANT,
                f"field {name!r} shapes differ: {pred[name].shape} vs {true[name].shape}",
            )
    values = {
        "mpjpe": mpjpe(pred["joints3d"], true["joints3d"]),
        "pa_mpjpe": pa_mpjpe(pred["joints3d"], true["joints3d"]),
        "mpve": mpve(pred["vertices"], true["vertices"]),
        "mpre": mpre(pred["rotations"], true["rotations"]),
    }
    lines = [f"{k} {f17(v)}" for k, v in values.items()]
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    write_csv(out / "metrics.csv", list(values), [[f17(v) for v in values.values()]])
    ctx["outputs"] += ["metrics.txt", "metrics.csv"]
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_gradcheck(args, out: Path, ctx: dict) -> int:
    ctx["config"] = {"preset": args.preset}
    previous_hook = gradcheck_mod.CORRUPT_OP
    if args.corrupt:
        gradcheck_mod.CORRUPT_OP = args.corrupt
    try:
        results = standard_op_checks(seed=args.seed, max_components=6)
    finally:
        gradcheck_mod.CORRUPT_OP = previous_hook
    if args.corrupt and args.corrupt not in results:
        raise CliError(EXIT_PARSE, f"unknown op {args.corrupt!r} for --corrupt")

    results["end_to_end"] = _end_to_end_gradcheck(args.preset, args.seed)

    rows = [[name, f17(err)] for name, err in results.items()]
    write_csv(out / "gradcheck.csv", ["op", "max_rel_error"], rows)
    ctx["outputs"].append("gradcheck.csv")
    for name, err in results.items():
        print(f"{name} {f17(err)}")
    failing = [name for name, err in results.items()
               if not np.isfinite(err) or err >= GRAD_TOLERANCE]
    if failing:
        raise CliError(EXIT_GRADCHECK, f"gradient check failed: {', '.join(failing)}")
    return EXIT_OK


def _end_to_end_gradcheck(preset: str, seed: int) -> float:
    """Worst relative error across every model parameter on a small build."""
    if preset not in ("tiny", "toy"):
        raise CliError(EXIT_PARSE, f"unknown preset {preset!r}; use tiny or toy")
    config = _PRESETS[preset]()
    body = synthesize_toy_model(seed, 60)
    model = build_model(config, body, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    # residual heads are zero at build time; small values let gradients
    # reach everything upstream
    for name, tensor in model.named_parameters().items():
        if ".fusion." in name or name.startswith("init_out"):
            tensor.data[...] = rng.normal(scale=0.05, size=tensor.shape)
    image = rng.normal(size=(config.image_size, config.image_size))
    frozen = forward(model, image).window_placements

    def run():
        result = forward(model, image, window_joints=frozen)
        return T.add(T.mean(T.mul(result.mesh, result.mesh)),
                     T.mean(T.mul(result.joints2d, result.joints2d)))

    report = grad_check_params(run, model.named_parameters(), max_components=2,
                               rng=np.random.default_rng(seed + 3))
    worst = max(report.values())
    return float(worst)


def cmd_overfit(args, out: Path, ctx: dict) -> int:
    config = resolve_config(ctx["overrides"], default_preset="toy")
    ctx["config"] = _config_dict(config)
    body = synthesize_toy_model(args.seed, args.vertices)
    model = build_model(config, body, seed=args.seed + 1)
    samples = make_synthetic_samples(body, config.image_size, args.samples,
                                     seed=args.seed + 2)
    ctx["inputs"].append(f"seed:{args.seed}")

    result = train_overfit(model, samples, steps=args.steps, lr=args.lr)

    write_csv(out / "loss_curve.csv", ["step", "loss"],
              [[i, f17(v)] for i, v in enumerate(result.losses)])
    write_csv(out / "metrics.csv", ["phase", "mpjpe", "mpre"], [
        ["initial", f17(result.metrics_initial["mpjpe"]), f17(result.metrics_initial["mpre"])],
        ["final", f17(result.metrics_final["mpjpe"]), f17(result.metrics_final["mpre"])],
    ])
    save_checkpoint(out / "model.tnsr", model)
    loss_curve_figure(out / "loss_curve.png", result.losses)
    ctx["outputs"] += ["loss_curve.csv", "metrics.csv", "model.tnsr", "loss_curve.png"]

    initial, final = result.losses[0], result.losses[-1]
    print(f"initial_loss {f17(initial)}")
    print(f"final_loss {f17(final)}")
    if args.steps == 0:
        raise CliError(EXIT_NO_TRAINING, "no training performed")
    if final > 0.1 * initial:
        raise CliError(EXIT_UNMET,
                       f"final loss {f17(final)} exceeds 10% of initial {f17(initial)}")
    return EXIT_OK


def cmd_attnviz(args, out: Path, ctx: dict) -> int:
    if args.model:
        model = load_checkpoint(args.model)
        ctx["inputs"].append(str(args.model))
    else:
        # untrained baseline: query/key projections start at zero, so every
        # attention row is exactly uniform
        config = resolve_config(ctx["overrides"], default_preset="toy")
        body = synthesize_toy_model(args.seed, 600)
        model = build_model(config, body, seed=args.seed + 1, zero_attention=True)
    config = model.config
    ctx["config"] = _config_dict(config)
    if not 1 <= args.joint <= config.n_joints:
        raise CliError(EXIT_INVARIANT,
                       f"joint index {args.joint} outside 1..{config.n_joints}")
    row = args.joint - 1
    image = load_input_image(args, config, ctx["inputs"])

    with record_attention() as records:
        forward(model, image, tag="viz")

    prefix = f"viz/block{config.blocks - 1}/unit{config.units - 1}"
    by_tag = {rec.tag: rec.weights for rec in records}
    panels = []
    float_rows = {}
    kl_rows = []

    for i in range(1, config.scales + 1):
        weights = by_tag[f"{prefix}/scale{i}"]       # (heads, rows, tokens)
        dist = weights.mean(axis=0)[row : row + 1]   # (1, tokens)
        side = config.grid // 2 ** (i - 1)
        write_pgm(out / f"scale{i}.pgm", dist.reshape(side, side))
        float_rows[f"scale{i}"] = dist
        kl_rows.append([f"scale{i}", f17(attention_kl_diffuseness(dist).item())])
        panels.append((f"scale {i}", dist.reshape(side, side)))
        ctx["outputs"].append(f"scale{i}.pgm")

    joint_w = by_tag[f"{prefix}/joint{row}"].mean(axis=0)  # (1, window^2)
    patch = joint_w.reshape(config.window, config.window)
    write_pgm(out / "joint_patch.pgm", patch)
    float_rows["joint"] = joint_w
    kl_rows.append(["joint", f17(attention_kl_diffuseness(joint_w).item())])
    panels.append(("joint window", patch))

    self_w = by_tag[f"{prefix}/self"].mean(axis=0)[row : row + 1]  # (1, rows)
    write_pgm(out / "self_row.pgm", self_w)
    float_rows["self"] = self_w
    kl_rows.append(["self", f17(attention_kl_diffuseness(self_w).item())])
    panels.append(("self row", self_w))

    container.write(out / "attn.tnsr", float_rows)
    write_csv(out / "kl.csv", ["map", "kl_nats"], kl_rows)
    attention_panel_figure(out / "panel.png", panels,
                           title=f"attention for joint {args.joint}")
    ctx["outputs"] += ["joint_patch.pgm", "self_row.pgm", "attn.tnsr",
                       "kl.csv", "panel.png"]
    for name, value in kl_rows:
        print(f"{name} {value}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> _Parser:
    parser = _Parser(prog="bodyformer", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", type=Path, default=None,
                        help="text file of key=value overrides (see FORMATS.md)")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory (default: runs/<command>)")
    parser.add_argument("--memory-budget-mb", type=float, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="run inference from a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--input-seed", type=int, default=None)
    group.add_argument("--input-file", type=Path, default=None)

    p = sub.add_parser("bench", help="attention cost sweeps and slope fits")
    p.add_argument("--variants", default="full,decoupled")
    p.add_argument("--sweep", default=",".join(str(v) for v in DEFAULT_SWEEP))
    p.add_argument("--l-t", type=int, default=26)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--pyramid", action=argparse.BooleanOptionalAction, default=True,
                   help="also compare the decoupled pyramid against full attention")

    p = sub.add_parser("metrics", help="evaluate predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--preset", choices=("tiny", "toy"), default="tiny")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("overfit", help="train on synthetic samples until memorized")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--vertices", type=int, default=600)

    p = sub.add_parser("attnviz", help="export attention maps and KL statistics")
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--joint", type=int, required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--input-seed", type=int, default=None)
    group.add_argument("--input-file", type=Path, default=None)

    return parser


_HANDLERS = {
    "forward": cmd_forward,
    "bench": cmd_bench,
    "metrics": cmd_metrics,
    "gradcheck": cmd_gradcheck,
    "overfit": cmd_overfit,
    "attnviz": cmd_attnviz,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # one-line parse errors, or --help
        return int(exc.code or 0)
    out = args.out if args.out is not None else Path("runs") / args.command
    started = time.perf_counter()
    ctx = {"inputs": [], "outputs": [], "config": {}, "overrides": {}}
    code = EXIT_OK
    message = None
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.config is not None:
            ctx["overrides"] = parse_config_file(args.config)
            ctx["inputs"].append(str(args.config))
        code = _HANDLERS[args.command](args, out, ctx)
    except CliError as exc:
        code, message = exc.code, str(exc)
    except container.ContainerParseError as exc:
        code, message = EXIT_PARSE, str(exc)
    except MemoryBudgetError as exc:
        code, message = EXIT_MEMORY, str(exc)
    except InsufficientDataError as exc:
        code, message = EXIT_FIT, f"insufficient points for fit: {exc}"
    except DivergenceError as exc:
        code, message = EXIT_DIVERGED, str(exc)
    except (InvariantError, ValueError) as exc:
        code, message = EXIT_INVARIANT, str(exc)
    except OSError as exc:
        code, message = EXIT_PARSE, str(exc)
    if message is not None:
        print(f"error: {message}", file=sys.stderr)
    manifest = {
        "command": args.command,
        "config": ctx["config"],
        "seed": args.seed,
        "inputs": ctx["inputs"],
        "outputs": ctx["outputs"],
        "version": __version__,
        "wall_time_s": time.perf_counter() - started,
        "exit_code": code,
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError:
        pass  # the run itself already reported; never mask its exit code
    return code


if __name__ == "__main__":
    raise SystemExit(main())
