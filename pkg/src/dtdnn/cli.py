"""Command-line entry point: ``dtdnn <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flag, file or config),
2 runtime failure.  Every run writes ``run.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    OracleError,
    dependency_map,
    gradcheck_suite,
    lookahead,
    offset_histogram,
    write_histograms_csv,
    write_json,
)
from .core import UsageError, make_rng, read_fseq, write_fseq
from .network import (
    MINI_CONFIG,
    CheckpointError,
    ConfigError,
    build_network,
    load_checkpoint,
    load_config,
    parse_config_text,
    save_checkpoint,
)
from .train import (
    TrainingError,
    apply_warp,
    compare_run,
    generate_batch,
    load_experiment,
    sample_warp,
    train_run,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    return p


def vars_for_json(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


def _write_run(out: Path, args: argparse.Namespace, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_json({"tool": "dtdnn", "version": __version__, "subcommand": args.command,
                "flags": vars_for_json(args), "resolved": resolved}, out / "run.json")


def cmd_gradcheck(args) -> int:
    cfg = load_config(_existing(args.config)) if args.config else parse_config_text(MINI_CONFIG, "<mini>")
    report = gradcheck_suite(cfg, T=args.length, seed=args.seed, eps=args.eps, tol=args.tol)
    out = Path(args.out)
    _write_run(out, args, {"network": cfg.to_dict()})
    write_json(report.to_dict(), out / "gradcheck.json")
    for name, err in report.errors.items():
        print(f"{'PASS' if err <= args.tol else 'FAIL'} {name} max_rel_err={err:.3e}")
    return 0 if report.passed else 2


def cmd_train(args) -> int:
    cfg = load_experiment(_existing(args.config))
    if args.clip:
        cfg = cfg.replace(clip_mode="latency_controlled")
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    cfg.validate()
    out = Path(args.out)
    _write_run(out, args, cfg.to_dict())
    report, net = train_run(cfg, return_network=True)
    report.write(out)
    save_checkpoint(net, out / "model.dtdn")
    (out / "timing.json").write_text(json.dumps({"wall_time_s": report.wall_time}) + "\n")
    if report.aborted:
        print(f"training aborted: {report.aborted}", file=sys.stderr)
        return 2
    final = report.final_step()
    print(f"step {final}: eval loss {report.median_loss(0.0, 'none'):.4f}")
    return 0


def _net_from_args(args):
    if args.ckpt:
        return load_checkpoint(_existing(args.ckpt))
    if args.config:
        return build_network(load_config(_existing(args.config)))
    raise UsageError("analyze-rf needs --ckpt or --config")


def cmd_analyze_rf(args) -> int:
    if args.length < 1:
        raise UsageError(f"--length must be >= 1, got {args.length}")
    net = _net_from_args(args)
    probes = args.probes if args.probes > 0 else None
    dmap = dependency_map(net, args.length, args.mode, seed=args.seed, probes=probes)
    la = lookahead(dmap, net.stride_product)
    out = Path(args.out)
    _write_run(out, args, {"network": net.config.to_dict()})
    dmap.write_csv(out / "rf_map.csv")
    write_json({"max_lookahead": la.max, "per_output": la.per_output.tolist(),
                "monotone_envelope": dmap.is_monotone(), "rows": dmap.rows, "cols": dmap.cols},
               out / "lookahead.json")
    print(f"rf_map {dmap.rows}x{dmap.cols}, max lookahead {la.max} input frames")
    return 0


def cmd_analyze_offsets(args) -> int:
    cfg = load_experiment(_existing(args.config))
    net = load_checkpoint(_existing(args.ckpt))
    # `train --clip` only flips the clip flag, so compare everything else
    relaxed = dataclasses.replace(cfg.network, clip_mode=net.config.clip_mode)
    if net.config.config_hash() != relaxed.config_hash():
        raise UsageError(f"{args.ckpt}: checkpoint config hash {net.config.config_hash()} does not match "
                         f"the network in {args.config}")
    rng = make_rng(args.seed)
    batches = [generate_batch(cfg.task, rng, cfg.batch_size, net.stride_product).features
               for _ in range(args.batches)]
    hists = offset_histogram(net, batches, args.bin_width)
    out = Path(args.out)
    _write_run(out, args, cfg.to_dict())
    write_histograms_csv(hists, out / "offsets_hist.csv")
    for layer, h in sorted(hists.items()):
        print(f"layer {layer}: {h.total} offsets, fraction <= 0: {h.fraction_nonpositive:.3f}")
    return 0


def cmd_warp(args) -> int:
    x = read_fseq(_existing(args.input))
    ws = sample_warp(x.shape[1], args.W, make_rng(args.seed))
    write_fseq(args.output, apply_warp(x, ws))
    # the output is a file, so the run record goes next to it
    meta = Path(str(args.output) + ".run.json")
    write_json({"tool": "dtdnn", "version": __version__, "subcommand": args.command,
                "flags": vars_for_json(args), "resolved": {"anchor": ws.anchor, "shift": ws.shift,
                                                           "length": ws.length}}, meta)
    print(f"anchor {ws.anchor:.3f} moved by {ws.shift:+.3f} frames")
    return 0


def cmd_compare(args) -> int:
    cfg = load_experiment(_existing(args.config))
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    cfg.validate()
    out = Path(args.out)
    _write_run(out, args, cfg.to_dict())
    result = compare_run(cfg, deformable_k=args.deformable_k)
    for arm, report in result["reports"].items():
        report.write(out / arm)
    write_json(result["summary"], out / "summary.json")
    s = result["summary"]
    W = repr(s["largest_warp"])
    print(f"W={W}: deformable vs standard relative gap {s['warp'][W]['relative_gap']:+.3f}")
    lat = s["latency"]
    print(f"clip at test only {lat['rel_free_train_clip_test']:+.3f}, "
          f"clip in train+test {lat['rel_clip_train_clip_test']:+.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dtdnn", description="Deformable TDNN experiments and analyses.",
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=f"dtdnn {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("gradcheck", help="finite-difference check of every backward pass", formatter_class=fmt)
    s.add_argument("--config", default=None, help="network config for the whole-network check "
                   "(default: the built-in mini config, same as configs/mini.cfg)")
    s.add_argument("--out", default="gradcheck_out", help="output directory")
    s.add_argument("--length", type=int, default=15, help="probe sequence length")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    s.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", help="train one network on the toy task", formatter_class=fmt)
    s.add_argument("--config", required=True, help="experiment config file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--clip", action="store_true", help="latency-controlled training (clip positive offsets)")
    s.add_argument("--steps", type=int, default=None, help="override the configured step count")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("analyze-rf", help="dependency map and lookahead", formatter_class=fmt)
    s.add_argument("--ckpt", default=None, help="checkpoint file")
    s.add_argument("--config", default=None, help="network config (fresh network) if no --ckpt")
    s.add_argument("--length", type=int, required=True, help="probe input length T")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--mode", choices=["jacobian", "perturb"], default="jacobian", help="dependency oracle")
    s.add_argument("--probes", type=int, default=0,
                   help="random output-channel mixtures per frame (0 = every channel)")
    s.add_argument("--seed", type=int, default=0, help="probe input seed")
    s.set_defaults(func=cmd_analyze_rf)

    s = sub.add_parser("analyze-offsets", help="histogram of used offsets", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--config", required=True, help="experiment config the checkpoint was trained with")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--batches", type=int, default=4, help="number of batches to draw")
    s.add_argument("--bin-width", type=float, default=0.25, help="histogram bin width in frames")
    s.add_argument("--seed", type=int, default=12345, help="batch seed")
    s.set_defaults(func=cmd_analyze_offsets)

    s = sub.add_parser("warp", help="time-warp an FSEQ feature file", formatter_class=fmt)
    s.add_argument("--in", dest="input", required=True, help="input FSEQ file")
    s.add_argument("--out", dest="output", required=True, help="output FSEQ file")
    s.add_argument("--W", type=float, required=True, help="time warp parameter (frames)")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("compare", help="paired standard vs deformable protocol", formatter_class=fmt)
    s.add_argument("--config", required=True, help="experiment config file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--steps", type=int, default=None, help="override the configured step count")
    s.add_argument("--deformable-k", type=int, default=2, help="number of trailing deformable layers")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, TrainingError, OracleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
