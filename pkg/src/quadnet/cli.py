"""quadnet command line.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .config import ARCHITECTURES, RunConfig
from .data import DatasetError, generate_dataset, load_dataset
from .evaluation import ablation_sweep, one_shot_nn, transfer_eval, write_ablation_csv
from .gradcheck import run_suite
from .losses import Variant
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn.optim import NonFiniteGradient
from .svm import representation_eval
from .tensor import GradCheckError

log = logging.getLogger("quadnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which collides with the data-error code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _variant(text: str) -> str:
    try:
        return Variant.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _add_run_flags(p: argparse.ArgumentParser, data_required: bool = True) -> None:
    p.add_argument("--config", help="flat JSON file of RunConfig fields; flags override it")
    p.add_argument("--data", help="dataset directory" + ("" if data_required else " (optional)"))
    p.add_argument("--loss", type=_variant, help="hingem3|hingem5|hingem6|contrastive5|triplet|triplet-da")
    p.add_argument("--dim", type=int)
    p.add_argument("--margin-push", type=float)
    p.add_argument("--margin-pull", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--window", type=int, help="iterations per convergence window")
    p.add_argument("--patience", type=int, help="consecutive converged windows required")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=sorted(ARCHITECTURES))
    p.add_argument("--out", help="output directory")


_RUN_FIELDS = ("data", "loss", "dim", "margin_push", "margin_pull", "lr", "momentum",
               "weight_decay", "batch", "max_iters", "window", "patience", "seed", "arch", "out")


def run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in _RUN_FIELDS}
    try:
        if args.config:
            return RunConfig.from_file(args.config, **overrides)
        return RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.num_seen >= args.num_classes:
        raise UsageError(f"--num-seen ({args.num_seen}) must be smaller than --num-classes ({args.num_classes})")
    try:
        bundle = generate_dataset(args.num_classes, args.num_seen, args.samples_per_class,
                                  args.val_fraction, args.test_fraction, args.seed,
                                  args.severity, out_dir=args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"wrote {len(bundle.real_labels)} images of {bundle.num_classes} classes to {args.out} "
          f"(fingerprint {bundle.fingerprint()[:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = run_config(args)
    bundle = load_dataset(_require(cfg.data, "--data"))
    out = _out_dir(_require(cfg.out, "--out"))

    def progress(it, mean):
        log.info("iteration %d  window loss %.6f", it, mean)

    result = train(bundle, cfg, progress=progress)
    ckpt = out / "checkpoint.qnet"
    save_checkpoint(result.params_t, result.params_r, ckpt)

    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "end_iteration", "mean_loss"])
        for i, m in enumerate(result.window_losses):
            w.writerow([i, (i + 1) * cfg.window, repr(float(m))])

    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"seed": cfg.seed, "streams": ["init", "sampler"]},
        "dataset": {"path": str(cfg.data), "fingerprint": bundle.fingerprint()},
        "shared_tower": result.shared,
        "iterations": result.iterations,
        "converged": result.converged,
        "final_loss": result.final_loss,
        "first_window_loss": result.first_window_loss,
        "checkpoint": {"file": ckpt.name, "sha256": _sha256(ckpt)},
    }
    _write_json(out / "manifest.json", manifest)
    print(f"{cfg.loss}: {result.iterations} iterations, final loss {result.final_loss:.6f}, "
          f"converged={result.converged}; wrote {out}")
    return EXIT_OK


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_towers(path, dim=None):
    return load_checkpoint(path, expected_dim=dim)


def cmd_eval_nn(args) -> int:
    bundle = load_dataset(args.data)
    params_t, params_r = _load_towers(args.checkpoint, args.dim)
    report = one_shot_nn(params_t, params_r, bundle, args.partitions)
    report.metadata.update(checkpoint=_sha256(args.checkpoint), command="eval-nn")
    text = report.to_json()
    if args.out:
        report.to_json(_out_dir(args.out) / "eval_nn.json")
    print(text)
    return EXIT_OK


def cmd_eval_transfer(args) -> int:
    bundle = load_dataset(args.data)
    params_t, params_r = _load_towers(args.checkpoint, args.dim)
    report = transfer_eval(params_t, params_r, bundle, args.partitions)
    report.metadata.update(checkpoint=_sha256(args.checkpoint), command="eval-transfer")
    text = report.to_json()
    if args.out:
        report.to_json(_out_dir(args.out) / "transfer.json")
    print(text)
    return EXIT_OK


def _parse_networks(specs: list[str]) -> dict[str, str]:
    nets = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        if name in nets:
            raise UsageError(f"duplicate network name {name!r}")
        nets[name] = path
    return nets


def cmd_eval_repr(args) -> int:
    bundle = load_dataset(args.data)
    networks = {}
    for name, path in _parse_networks(args.checkpoint).items():
        # the real tower is the one that sees captured images
        networks[name] = _load_towers(path)[1]
    result = representation_eval(networks, bundle, args.instances, args.repeats, args.seed,
                                 c_reg=args.c_reg, tol=args.tol)
    if args.out:
        out = _out_dir(args.out)
        result.write_csv(out / "repr.csv")
        _write_json(out / "repr_samples.json", result.sample_log)
    for part in ("omega_s", "omega_u"):
        print(f"[{part}] error % (ci95)")
        print(result.table(part))
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = run_config(args)
    bundle = load_dataset(_require(cfg.data, "--data"))
    rows = ablation_sweep(bundle, args.dims, args.variants, cfg)
    if cfg.out:
        out = _out_dir(cfg.out)
        write_ablation_csv(rows, out / "ablation.csv")
        _write_json(out / "ablation_reports.json",
                    [{"dim": r["dim"], "variant": r["variant"], "report": r["report"].to_dict()} for r in rows])
    for r in rows:
        print(f"D={r['dim']:<4d} {r['variant']:<13s} avg {r['avg']:.4f} seen {r['seen']:.4f} unseen {r['unseen']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed, set(args.only) if args.only else None)
    if not results:
        raise UsageError("no gradient checks selected")
    failed = 0
    for name, err, tol, ok in results:
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<26s} max rel err {err:.3e}  (< {tol:.0e})")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quadnet", description="Quadruplet co-domain embedding toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a procedural synthetic sign dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, default=12)
    p.add_argument("--num-seen", type=int, default=8)
    p.add_argument("--samples-per-class", type=int, default=60)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--severity", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train towers and write checkpoint, loss CSV and manifest")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval-nn", cmd_eval_nn, "one-shot nearest-template evaluation"),
                              ("eval-transfer", cmd_eval_transfer,
                               "one-shot evaluation of a checkpoint on another dataset")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--dim", type=int, help="expected embedding dimension")
        p.add_argument("--partitions", type=_str_list, default=["omega_s", "omega_u"])
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("eval-repr", help="SVM probing of frozen fc1 features")
    p.add_argument("--checkpoint", required=True, action="append",
                   help="NAME=PATH or PATH; repeat for several networks")
    p.add_argument("--data", required=True)
    p.add_argument("--instances", type=_int_list, default=[10, 50, 100, 200])
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--c-reg", type=float, default=100.0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_repr)

    p = sub.add_parser("ablation", help="sweep embedding dimension and loss variant")
    _add_run_flags(p)
    p.add_argument("--dims", type=_int_list, default=[50, 100, 150, 200])
    p.add_argument("--variants", type=lambda s: [_variant(v) for v in _str_list(s)],
                   default=["hingem3", "hingem5", "hingem6"])
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", type=_str_list, help="comma-separated case names")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    from .train import NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"quadnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"quadnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NonFiniteGradient, GradCheckError, FloatingPointError) as exc:
        print(f"quadnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # dimension mismatches, empty partitions, undersized pools
        print(f"quadnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
