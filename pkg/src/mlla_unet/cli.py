"""Command-line entry point: ``mlla-unet <command> [--flags]``.

Exit status is 0 on success, 1 on invalid input (bad flags, configs, files
or shapes) and 2 when a computation produces non-finite values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import MllaError, NumericError, ValidationError
from .rng import default_seed, generator

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

# reference totals for the named presets: parameters (millions), GFLOPs at 224x224
REFERENCE = {"tiny": (34.14, 14.66), "small": (64.52, 26.30), "base": (144.5, 58.56)}


class UsageError(MllaError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _schema(name: str) -> Dict:
    from importlib import resources
    return json.loads(resources.files("mlla_unet").joinpath("schemas").joinpath(f"{name}.json").read_text())


def validate_json(obj: Dict, schema: str) -> None:
    """Check ``obj`` against a shipped schema; skipped when jsonschema is not installed."""
    try:
        import jsonschema
    except ImportError:
        return
    try:
        jsonschema.validate(obj, _schema(schema))
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"report does not match schema {schema}: {exc.message}") from exc


def _emit(obj: Dict, text: str, args, schema: str, out_file: Optional[Path] = None) -> None:
    validate_json(obj, schema)
    if out_file is not None:
        out_file.parent.mkdir(parents=True, exist_ok=True)
        out_file.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    print(json.dumps(obj, indent=2, sort_keys=True) if args.json else text)


# ---------------------------------------------------------------------------
# commands


def cmd_forward(args) -> int:
    from .network import Trace, build_model
    from .stf import read_stf, write_stf
    from .tensor import no_grad

    model = build_model(args.config, args.seed)
    c = model.config
    if args.input:
        image = read_stf(args.input)
        if image.ndim == 3:
            image = image[None]
    else:
        size = args.size or c.input_size
        image = generator(args.seed).standard_normal((args.batch, c.in_channels, size, size))
    image = image.astype(np.float32)
    trace = Trace()
    with no_grad():
        logits = model(image, trace)
    h, w = image.shape[2:]
    rows = []
    for i, t in enumerate(trace.encoder + trace.decoder):
        scale = 4 * 2 ** (i if i < c.stages else 2 * (c.stages - 1) - i)
        rows.append({"stage": f"res{i + 1}", "extent": [h // scale, w // scale],
                     "tokens": int(t.shape[1]), "channels": int(t.shape[2])})
    obj = {"config": c.name, "input": list(image.shape), "stages": rows, "logits": list(logits.shape)}
    if args.out:
        write_stf(args.out, logits.data)
    lines = [f"{'stage':<6} {'extent':>9} {'tokens':>7} {'channels':>8}"]
    for r in rows:
        lines.append(f"{r['stage']:<6} {r['extent'][0]:>4}x{r['extent'][1]:<4} {r['tokens']:>7} {r['channels']:>8}")
    lines.append(f"logits {tuple(logits.shape)}")
    print(json.dumps(obj, indent=2) if args.json else "\n".join(lines))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .data import SynthSpec, write_dataset

    spec = SynthSpec(seed=args.seed, count=args.count, size=args.size, classes=args.classes,
                     contrast=args.contrast, noise=args.noise)
    written = write_dataset(args.out, spec)
    print(f"wrote {len(written) // 2} samples to {args.out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .losses import LossConfig
    from .train import TrainConfig, train_toy

    cfg = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, final_lr=args.final_lr,
                      weight_decay=args.weight_decay, augment=not args.no_augment, seed=args.seed,
                      loss=LossConfig(args.alpha, args.beta))

    def log(rec):
        validate_json(rec, "train_log")
        if args.json:
            print(json.dumps(rec, sort_keys=True))
        elif rec["step"] % args.log_every == 0 or rec["step"] == cfg.steps - 1:
            print(f"step {rec['step']:>5d}  lr {rec['lr']:.3e}  total {rec['total']:.6f}  "
                  f"ce {rec['ce']:.6f}  dice {rec['dice']:.6f}")

    history = train_toy(args.config, args.data, args.out, cfg, log)
    if not args.json:
        if history:
            print(f"loss {history[0]['total']:.6f} -> {history[-1]['total']:.6f} over {len(history)} steps")
        print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluate import evaluate, format_report, rounded
    from .train import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    spec, images, labels = load_dataset(args.data)
    report = rounded(evaluate(model, images, labels))
    report["checkpoint"] = str(args.checkpoint)
    report["data"] = str(args.data)
    _emit(report, format_report(report), args, "eval_report", args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import KERNELS, run_kernel, write_report

    kernels = list(KERNELS) if args.kernel == "all" else [args.kernel]
    texts, objs = [], []
    for name in kernels:
        rep = run_kernel(name, args.ns, args.d, args.repetitions, args.seed)
        obj = rep.to_dict()
        validate_json(obj, "bench_report")
        write_report(rep, args.out)
        texts.append(rep.text())
        objs.append(obj)
    print(json.dumps(objs if len(objs) > 1 else objs[0], indent=2) if args.json else "\n\n".join(texts))
    return EXIT_OK


def _module_rows(model, report) -> List[Dict]:
    """Per-module parameter and multiply-add counts keyed like the counter's breakdown."""
    L = model.config.stages
    params: Dict[str, int] = {}
    for name, p in model.registry().items():
        head, *rest = name.split(".")
        if head in ("encoder", "downs"):
            key = ("encoder" if head == "encoder" else "down") + str(int(rest[0]) + 1)
        elif head in ("ups", "decoder", "fuse"):
            key = {"ups": "up", "decoder": "decoder", "fuse": "fuse"}[head] + str(L - 1 - int(rest[0]))
        else:
            key = head
        params[key] = params.get(key, 0) + p.size
    names = list(report.breakdown) + [k for k in params if k not in report.breakdown]
    return [{"name": k, "params": int(params.get(k, 0)), "macs": int(report.breakdown.get(k, 0))} for k in names]


def cmd_params(args) -> int:
    from .network import build_model, count_flops, count_params

    model = build_model(args.config, args.seed)
    c = model.config
    size = args.input_size or c.input_size
    report = count_flops(model, (size, size))
    total = count_params(model)
    ref = REFERENCE.get(c.name)
    obj = {
        "config": c.name, "input_size": size, "modules": _module_rows(model, report),
        "total_params": int(total), "total_macs": int(report.macs), "total_flops": int(report.flops),
        "reference": {"params": ref[0], "gflops": ref[1]} if ref else None,
    }
    lines = [f"config {c.name}  input {size}x{size}  (FLOPs = 2 x multiply-adds)",
             f"{'module':<10} {'params':>12} {'MACs':>15}"]
    for r in obj["modules"]:
        lines.append(f"{r['name']:<10} {r['params']:>12d} {r['macs']:>15d}")
    lines.append(f"{'total':<10} {total:>12d} {report.macs:>15d}")
    lines.append(f"params {total / 1e6:.2f}M  GFLOPs {report.flops / 1e9:.2f}")
    if ref:
        lines.append(f"reference: params {ref[0]}M  GFLOPs {ref[1]}  "
                     f"(deviation {100 * (total / 1e6 / ref[0] - 1):+.1f}% / {100 * (report.flops / 1e9 / ref[1] - 1):+.1f}%)")
    _emit(obj, "\n".join(lines), args, "params_report", args.out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run

    def report(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}", flush=True)

    results = run(args.seed, report)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_INVALID


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlla-unet", description="Linear-attention U-Net segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=_positive_int, default=None, help="RNG seed (default: $MLLA_SEED or 0)")
        p.set_defaults(fn=fn)
        return p

    p = command("forward", cmd_forward, "run one forward pass and print every stage shape")
    p.add_argument("--config", default="tiny", help="preset name or YAML path")
    p.add_argument("--input", type=Path, help="STF image [C,H,W] or [N,C,H,W]; random if omitted")
    p.add_argument("--size", type=_positive_int, help="random input extent (default: config input_size)")
    p.add_argument("--batch", type=_positive_int, default=1)
    p.add_argument("--out", type=Path, help="write logits as STF")
    p.add_argument("--json", action="store_true")

    p = command("gen-data", cmd_gen_data, "write a synthetic shapes dataset as STF files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=_positive_int, default=64)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--classes", type=_positive_int, default=3)
    p.add_argument("--contrast", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.15)

    p = command("train-toy", cmd_train_toy, "train on a generated dataset and write a checkpoint")
    p.add_argument("--config", default="toy", help="preset name or YAML path")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=_positive_int, default=200)
    p.add_argument("--batch", type=_positive_int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--final-lr", type=float, default=1e-6)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--alpha", type=float, default=0.4, help="cross-entropy weight")
    p.add_argument("--beta", type=float, default=0.6, help="Dice weight")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--log-every", type=_positive_int, default=20)
    p.add_argument("--json", action="store_true", help="print one JSON record per step")

    p = command("eval", cmd_eval, "score a checkpoint on a dataset (per-class DSC and HD95)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="also write the JSON report here")
    p.add_argument("--json", action="store_true")

    p = command("bench", cmd_bench, "time linear vs softmax attention across sequence lengths")
    p.add_argument("--kernel", choices=["linear", "softmax", "all"], default="all")
    p.add_argument("--ns", type=_positive_int, nargs="+", default=[1024, 2048, 4096, 8192, 16384])
    p.add_argument("--d", type=_positive_int, default=64)
    p.add_argument("--repetitions", type=_positive_int, default=5)
    p.add_argument("--out", type=Path, default=Path("."), help="directory for bench_<kernel>.json")
    p.add_argument("--json", action="store_true")

    p = command("params", cmd_params, "per-module parameter and multiply-add counts")
    p.add_argument("--config", default="tiny", help="preset name or YAML path")
    p.add_argument("--input-size", type=_positive_int, help="square input extent for the count")
    p.add_argument("--out", type=Path, help="also write the JSON report here")
    p.add_argument("--json", action="store_true")

    command("selftest", cmd_selftest, "run the built-in oracle and gradient checks")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.seed = default_seed(args.seed)
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MllaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
