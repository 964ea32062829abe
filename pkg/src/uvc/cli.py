"""Command-line front end.

Every subcommand reads an optional ``--config`` file of ``key = value`` lines
whose keys are the subcommand's long flag names (dashes or underscores).
Flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
from dataclasses import dataclass

import numpy as np

from uvc import codec, metrics, nnlf
from uvc.core import FrameBuffer, load_yuv420, save_yuv420
from uvc.errors import CodecError, InvalidArgumentError
from uvc.transform import QP_MAX, QP_MIN

QP_LIST = (22, 27, 32, 37, 42)
TOOL_NAMES = ("uqt", "nnlf", "bim")
STATS_COLUMNS = ("poc", "layer", "qp_effective_mean", "bits", "psnr_y", "psnr_u", "psnr_v",
                 "slice_type", "qp_slice", "md5")


class ConfigError(InvalidArgumentError):
    pass


# ---------------------------------------------------------------- option parsing

def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in str(text).replace(" ", "").split(",") if t)
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


def _tools(text: str) -> frozenset:
    names = {t.lower() for t in _str_list(text)} - {"none"}
    bad = names - set(TOOL_NAMES)
    if bad:
        raise ValueError(f"unknown tool(s) {', '.join(sorted(bad))}; choose from {', '.join(TOOL_NAMES)}")
    return frozenset(names)


def _toolsets(text: str) -> tuple[frozenset, ...]:
    """Semicolon-separated tool lists, e.g. ``uqt;uqt,bim``."""
    return tuple(_tools(part) for part in str(text).split(";") if part.strip())


@dataclass(frozen=True)
class Opt:
    name: str
    kind: object = str
    default: object = None
    help: str = ""
    choices: tuple | None = None
    required: bool = False

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


COMMON = [Opt("config", str, None, "key = value file; command-line flags override it")]
CLIP = [
    Opt("input", str, None, "raw I420 input clip", required=True),
    Opt("width", int, None, "luma width (multiple of 64)", required=True),
    Opt("height", int, None, "luma height (multiple of 64)", required=True),
    Opt("frames", int, 0, "encode only the first N frames (0 = all)"),
]
CODING = [
    Opt("qp", int, 32, f"base QP in [{QP_MIN}, {QP_MAX}]"),
    Opt("gop", str, "ra", "picture structure", choices=tuple(codec.GOP_CODES)),
    Opt("search-range", int, 8, "integer motion search range"),
    Opt("min-size", int, 4, "smallest block side"),
    Opt("max-depth", int, 4, "maximum partition depth below a CTU"),
    Opt("bim-sigma", float, None, "importance scale (default 2/3 of the base quantizer step)"),
    Opt("bim-thresholds", _float_list, None, "four ascending importance cut points"),
    Opt("weights", _str_list, (), "comma-separated filter weight files"),
]

COMMANDS = {
    "encode": COMMON + CLIP + CODING + [
        Opt("tools", _tools, frozenset({"uqt"}), "comma-separated tools: uqt, nnlf, bim (or none)"),
        Opt("out", str, None, "output stream", required=True),
        Opt("stats", str, None, "per-picture CSV (default: <out>.csv)"),
        Opt("recon", str, None, "also write the reconstruction as I420"),
    ],
    "decode": COMMON + [
        Opt("input", str, None, "UVC1 stream", required=True),
        Opt("out", str, None, "output I420 file", required=True),
        Opt("weights", _str_list, (), "comma-separated filter weight files"),
        Opt("md5", str, None, "write one 'poc md5' line per frame"),
        Opt("check-stats", str, None, "encoder stats CSV whose md5 column must match"),
    ],
    "metrics": COMMON + [
        Opt("input", str, None, "RD CSV: label, component, bitrate_kbps, psnr_db", required=True),
        Opt("anchor", str, "anchor", "label of the reference curve"),
        Opt("report", str, None, "write the BD-rate table as CSV"),
    ],
    "train": COMMON + CLIP + CODING + [
        Opt("qps", _int_list, (22, 27), "QPs whose reconstructions form the training set"),
        Opt("component", str, "luma", "plane group", choices=("luma", "chroma")),
        Opt("slice", str, "intra", "slice type the model serves", choices=("intra", "inter")),
        Opt("steps", int, 200, "optimizer steps"),
        Opt("step-size", float, 0.01, "SGD step size"),
        Opt("batch", int, 4, "patches per step"),
        Opt("patch", int, 32, "patch side"),
        Opt("seed", int, 0, "random seed"),
        Opt("out", str, None, "output weight file", required=True),
    ],
    "ablate": COMMON + CLIP + CODING + [
        Opt("toolsets", _toolsets, (frozenset({"uqt"}),),
            "semicolon-separated tool lists compared with the anchor; 'none' reruns the anchor"),
        Opt("qps", _int_list, QP_LIST, "QP list (at least 4 points)"),
        Opt("fps", float, 30.0, "frame rate used to turn bits into kbps"),
        Opt("rd-csv", str, None, "write every RD point as CSV"),
        Opt("report", str, None, "write the BD-rate table as CSV"),
    ],
}

HELP = {
    "encode": "encode a raw I420 clip",
    "decode": "decode a stream to I420",
    "metrics": "BD-rate report from an RD CSV",
    "train": "train loop-filter weights on a clip",
    "ablate": "compare tool sets over a QP list",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uvc", description="Block-based hybrid video codec with asymmetric quaternary splits, "
                                "a CNN loop filter and importance-driven delta QP.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name],
                           epilog="Any flag may also be given as 'name = value' in the --config file.")
        for o in opts:
            kw = dict(dest=o.dest, default=argparse.SUPPRESS, help=o.help, metavar=o.dest.upper())
            if o.choices:
                kw["choices"] = o.choices
            p.add_argument(f"--{o.name}", **kw)
    return parser


def read_config(path: str, opts) -> dict:
    """Parse a key = value file; unknown keys and malformed lines are errors."""
    known = {o.dest for o in opts} - {"config"}
    out = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        out[key] = value
    return out


def resolve(command: str, given: dict) -> argparse.Namespace:
    """Defaults, then config file, then flags; values converted and required keys checked."""
    opts = COMMANDS[command]
    raw: dict = {}
    if "config" in given:
        raw.update(read_config(given["config"], opts))
    raw.update({k: v for k, v in given.items() if k != "config"})
    values = {}
    for o in opts:
        if o.dest == "config":
            continue
        if o.dest in raw:
            value = raw[o.dest]
            if isinstance(value, str):
                try:
                    value = o.kind(value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid value for '{o.dest}': {exc}") from None
            if o.choices and value not in o.choices:
                raise ConfigError(f"'{o.dest}' must be one of {', '.join(o.choices)}, got {value!r}")
            values[o.dest] = value
        elif o.required:
            raise ConfigError(f"missing required setting '{o.dest}'")
        else:
            values[o.dest] = o.default
    return argparse.Namespace(**values)


# ---------------------------------------------------------------- validation helpers

def _need_file(path: str, key: str) -> None:
    if not os.path.isfile(path):
        raise ConfigError(f"'{key}': file not found: {path}")


def _need_parent(path: str, key: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ConfigError(f"'{key}': directory does not exist: {parent}")


def _check_qp(qp: int, key: str = "qp") -> None:
    if not QP_MIN <= qp <= QP_MAX:
        raise ConfigError(f"'{key}' must lie in [{QP_MIN},{QP_MAX}], got {qp}")


def _load_clip(args) -> list[FrameBuffer]:
    _need_file(args.input, "input")
    frames = load_yuv420(args.input, args.width, args.height)
    if args.frames < 0:
        raise ConfigError("'frames' must be >= 0")
    if args.frames:
        frames = frames[:args.frames]
    return frames


def _load_models(paths) -> list[nnlf.ModelWeights]:
    for p in paths:
        _need_file(p, "weights")
    return [nnlf.load_weights(p) for p in paths]


def _codec_config(args, qp: int, tools, models) -> codec.CodecConfig:
    kw = {}
    if args.bim_thresholds is not None:
        kw["bim_thresholds"] = tuple(args.bim_thresholds)
    return codec.CodecConfig(qp=qp, gop=args.gop, uqt="uqt" in tools, nnlf="nnlf" in tools, bim="bim" in tools,
                             models=list(models) if "nnlf" in tools else [], search_range=args.search_range,
                             min_size=args.min_size, max_depth=args.max_depth, bim_sigma=args.bim_sigma, **kw)


def _check_coding(args) -> None:
    if args.width % codec.CTU_SIZE or args.height % codec.CTU_SIZE or args.width <= 0 or args.height <= 0:
        raise ConfigError(f"'width'/'height' must be positive multiples of {codec.CTU_SIZE}")


# ---------------------------------------------------------------- subcommands

def write_stats(stats, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_COLUMNS)
        for s in sorted(stats, key=lambda s: s.poc):
            w.writerow([s.poc, s.layer, f"{s.qp_effective_mean:.4f}", s.bits, f"{s.psnr_y:.4f}",
                        f"{s.psnr_u:.4f}", f"{s.psnr_v:.4f}", s.slice_type, s.qp_slice, s.md5])


def cmd_encode(args) -> int:
    _check_qp(args.qp)
    _check_coding(args)
    stats_path = args.stats or args.out + ".csv"
    for key, path in (("out", args.out), ("stats", stats_path), ("recon", args.recon)):
        if path:
            _need_parent(path, key)
    if "nnlf" in args.tools and not args.weights:
        raise ConfigError("'weights': the nnlf tool needs at least one weight file")
    frames = _load_clip(args)
    models = _load_models(args.weights) if "nnlf" in args.tools else []
    res = codec.encode_sequence(frames, _codec_config(args, args.qp, args.tools, models))
    with open(args.out, "wb") as fh:
        fh.write(res.stream)
    write_stats(res.stats, stats_path)
    if args.recon:
        save_yuv420(res.recon, args.recon)
    kbits = res.total_bits / 1000.0
    print(f"encoded {len(frames)} frames, {len(res.stream)} bytes ({kbits:.1f} kbit) -> {args.out}")
    return 0


def _frame_md5(frame: FrameBuffer) -> str:
    return hashlib.md5(frame.to_bytes()).hexdigest()


def cmd_decode(args) -> int:
    _need_file(args.input, "input")
    _need_parent(args.out, "out")
    if args.md5:
        _need_parent(args.md5, "md5")
    if args.check_stats:
        _need_file(args.check_stats, "check-stats")
    models = _load_models(args.weights)
    with open(args.input, "rb") as fh:
        data = fh.read()
    frames = codec.decode_sequence(data, models)
    save_yuv420(frames, args.out)
    digests = [_frame_md5(f) for f in frames]
    if args.md5:
        with open(args.md5, "w") as fh:
            for poc, d in enumerate(digests):
                fh.write(f"{poc} {d}\n")
    if args.check_stats:
        with open(args.check_stats, newline="") as fh:
            expected = {int(r["poc"]): r["md5"] for r in csv.DictReader(fh) if r.get("md5")}
        bad = [poc for poc, d in enumerate(digests) if expected.get(poc) not in (None, d)]
        if len(expected) != len(digests) or bad:
            print(f"error: reconstruction mismatch at poc {bad or 'count'}", file=sys.stderr)
            return 1
        print(f"md5 verified for {len(digests)} frames")
    print(f"decoded {len(frames)} frames -> {args.out}")
    return 0


def cmd_metrics(args) -> int:
    _need_file(args.input, "input")
    if args.report:
        _need_parent(args.report, "report")
    curves = metrics.read_rd_csv(args.input)
    rows = metrics.report_rows(curves, args.anchor)
    print(metrics.format_report(rows, args.anchor))
    if args.report:
        metrics.write_report_csv(rows, args.report)
    return 0


def cmd_train(args) -> int:
    for qp in args.qps:
        _check_qp(qp, "qps")
    _check_coding(args)
    if not args.qps:
        raise ConfigError("'qps' must list at least one QP")
    _need_parent(args.out, "out")
    frames = _load_clip(args)
    component = nnlf.LUMA if args.component == "luma" else nnlf.CHROMA
    slice_type = nnlf.INTRA if args.slice == "intra" else nnlf.INTER
    pairs = []
    for qp in args.qps:
        cfg = _codec_config(args, qp, {"uqt"}, [])
        pairs += codec.training_pairs(frames, cfg, component, slice_type)
    if not pairs:
        raise ConfigError(f"the '{args.gop}' structure has no {args.slice} pictures to train on")
    tc = nnlf.TrainConfig(steps=args.steps, step_size=args.step_size, batch=args.batch, patch=args.patch,
                          seed=args.seed)
    result = nnlf.train(pairs, tc, component=component, slice_type=slice_type)
    nnlf.save_weights(result.model, args.out)
    print(f"trained {args.component}/{args.slice} model on {len(pairs)} pictures, "
          f"loss {result.losses[0]:.6g} -> {result.losses[-1]:.6g}; hash {codec.model_hash(result.model).hex()}")
    return 0


def toolset_label(tools) -> str:
    return "anchor" if not tools else "anchor+" + "+".join(t for t in TOOL_NAMES if t in tools)


def rd_points(frames, args, tools, models, qps):
    """{component: [(kbps, psnr)]} for one tool set; failed encodes are skipped."""
    pts = {c: [] for c in metrics.COMPONENTS}
    for qp in qps:
        try:
            res = codec.encode_sequence(frames, _codec_config(args, qp, tools, models))
        except CodecError as exc:
            print(f"warning: {toolset_label(tools)} qp {qp} failed: {exc}", file=sys.stderr)
            continue
        kbps = res.total_bits / len(frames) * args.fps / 1000.0
        for c in metrics.COMPONENTS:
            pts[c].append((kbps, float(np.mean([getattr(s, f"psnr_{c}") for s in res.stats]))))
    return pts


def cmd_ablate(args) -> int:
    for qp in args.qps:
        _check_qp(qp, "qps")
    _check_coding(args)
    if len(set(args.qps)) < 4:
        raise ConfigError("'qps' needs at least 4 distinct values for BD-rate")
    for key, path in (("rd-csv", args.rd_csv), ("report", args.report)):
        if path:
            _need_parent(path, key)
    if any("nnlf" in t for t in args.toolsets) and not args.weights:
        raise ConfigError("'weights': a tool set uses nnlf but no weight file was given")
    frames = _load_clip(args)
    models = _load_models(args.weights)
    # an explicit 'none' tool set re-encodes the anchor as a sanity row (expected 0%)
    labelled = {"anchor": frozenset()}
    for tools in args.toolsets:
        labelled.setdefault(toolset_label(tools) if tools else "anchor-rerun", tools)
    curves, rows = {}, []
    for label, tools in labelled.items():
        pts = rd_points(frames, args, tools, models, sorted(set(args.qps)))
        if len(pts["y"]) < 4:
            raise ConfigError(f"{label}: only {len(pts['y'])} QP points succeeded; BD-rate needs at least 4")
        curves[label] = {c: metrics.RdCurve.from_points(p) for c, p in pts.items()}
        rows += [(label, c, r, p) for c in metrics.COMPONENTS for r, p in sorted(pts[c])]
    if args.rd_csv:
        metrics.write_rd_csv(rows, args.rd_csv)
    report = metrics.report_rows(curves, "anchor")
    print(metrics.format_report(report, "anchor"))
    if args.report:
        metrics.write_report_csv(report, args.report)
    return 0


RUNNERS = {"encode": cmd_encode, "decode": cmd_decode, "metrics": cmd_metrics, "train": cmd_train,
           "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    given = {k: v for k, v in vars(ns).items() if k != "command"}
    try:
        args = resolve(ns.command, given)
        return RUNNERS[ns.command](args)
    except CodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
