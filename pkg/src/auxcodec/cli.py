"""Command-line interface.

Exit codes: 0 success, 2 missing/unreadable input, 3 config or container
mismatch (bad magic, checksum, version, hash), 4 internal invariant
breach, 5 non-overlapping RD curves.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import container
from .codec import REPORT_COLUMNS, CodecError, decode_image, encode_image
from .config import ConfigError, load_config
from .container import ContainerError
from .metrics import (
    CsvFormatError,
    CurveError,
    NoOverlapError,
    RDPoint,
    bd_rate,
    psnr,
    read_rd_csv,
    write_rd_csv,
)
from .model import CodecModel
from .ppm import PPMError, read_ppm, write_ppm
from .weights import WeightFileError

EXIT_MISSING = 2
EXIT_MISMATCH = 3
EXIT_INVARIANT = 4
EXIT_NO_OVERLAP = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _require(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {path}", EXIT_MISSING)
    return p


def _load_model(weights: str, config: str | None) -> CodecModel:
    wpath = _require(weights)
    try:
        model = CodecModel.load(wpath)
    except (WeightFileError, KeyError, ConfigError, ValueError) as exc:
        raise CliError(f"{weights}: {exc}", EXIT_MISSING) from exc
    if config is not None:
        try:
            cfg = load_config(_require(config))
        except ConfigError as exc:
            raise CliError(f"{config}: {exc}", EXIT_MISSING) from exc
        if cfg != model.cfg:
            diff = [k for k, v in cfg.to_dict().items() if model.cfg.to_dict()[k] != v]
            raise CliError(f"config {config} does not match weights {weights} "
                           f"(differs in: {', '.join(diff)})", EXIT_MISMATCH)
    return model


def _read_image(path: str) -> np.ndarray:
    try:
        return read_ppm(_require(path))
    except PPMError as exc:
        raise CliError(f"{path}: {exc}", EXIT_MISSING) from exc


def cmd_encode(args) -> int:
    model = _load_model(args.weights, args.config)
    img = _read_image(args.input)
    data, report, trace = encode_image(img, model)
    Path(args.output).write_bytes(data)
    quality = None
    if args.verify:
        decoded, dtrace = decode_image(data, model, return_trace=True)
        if not np.array_equal(dtrace.x_hat, trace.x_hat):
            raise CliError("decoder reconstruction differs from encoder side", EXIT_INVARIANT)
        quality = psnr(img / 255.0, decoded / 255.0)
        print("roundtrip=exact")
    if args.report:
        print(report.csv_line(quality))
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.weights, args.config)
    data = _require(args.input).read_bytes()
    img, trace = decode_image(data, model, return_trace=True)
    write_ppm(args.output, img)
    if args.verify:
        ref = _read_image(args.verify)
        redone, _, etrace = encode_image(ref, model)
        if redone != data or not np.array_equal(etrace.x_hat, trace.x_hat):
            raise CliError("re-encoding the reference does not reproduce this stream",
                           EXIT_INVARIANT)
        print("roundtrip=exact")
    return 0


def cmd_inspect(args) -> int:
    data = _require(args.input).read_bytes()
    header = container.read_header(data)
    print(f"magic=AIFC version={header.version}")
    print(f"model_hash={header.model_hash.hex()}")
    print(f"width={header.width} height={header.height} lambda_index={header.lambda_index}")
    names = ("z_aux", "y_aux", "z", "y")
    for name, n in zip(names, header.lengths):
        print(f"stream {name}: {n} bytes")
    print(f"payload={header.payload_size} header={container.HEADER_SIZE} total={len(data)}")
    print("checksum=ok")
    return 0


def cmd_train(args) -> int:
    from .config import CodecConfig
    from .train import format_trace_csv, synthetic_patches, train

    cfg = load_config(_require(args.config)) if args.config else CodecConfig()
    if args.lam is not None:
        cfg = cfg.replace(lam=args.lam)
    patches = synthetic_patches(args.patches, cfg.pad_multiple, seed=args.seed)
    state = train(patches, config=cfg, steps=args.steps, batch_size=args.batch_size,
                  lr=args.lr, seed=args.seed, log_every=args.log_every)
    state.model.round_to_float32()
    state.model.save(args.output)
    if args.trace:
        Path(args.trace).write_text(format_trace_csv(state.trace))
    if args.checkpoint:
        state.save(args.checkpoint)
    if state.trace:
        print(f"steps={state.step} loss={state.trace[-1]['loss']:.6f}")
    return 0


def _read_weights_list(path: str) -> list[tuple[float, Path]]:
    entries = []
    base = _require(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.replace("=", ",").split(",")]
        if len(parts) != 2:
            raise CliError(f"{path}:{lineno}: expected 'lambda,weights'", EXIT_MISSING)
        try:
            lam = float(parts[0])
        except ValueError:
            raise CliError(f"{path}:{lineno}: bad lambda {parts[0]!r}", EXIT_MISSING)
        wp = Path(parts[1])
        entries.append((lam, wp if wp.is_absolute() else base / wp))
    return sorted(entries, key=lambda e: e[0])


def cmd_eval_curve(args) -> int:
    inputs = sorted(Path(args.inputs).glob("*.ppm"))
    if not inputs:
        raise CliError(f"no .ppm files in {args.inputs}", EXIT_MISSING)
    images = [(p.name, _read_image(str(p))) for p in inputs]
    points = []
    for lam, wpath in _read_weights_list(args.weights_list):
        model = _load_model(str(wpath), None)
        bpps, quals = [], []
        for _, img in sorted(images, key=lambda t: t[0]):
            data, report, _ = encode_image(img, model)
            decoded = decode_image(data, model)
            bpps.append(report.bpp)
            quals.append(psnr(img / 255.0, decoded / 255.0))
        points.append(RDPoint(float(np.mean(bpps)), float(np.mean(quals)), lam))
    write_rd_csv(args.out, points)
    return 0


def _read_curve(path: str):
    _require(path)
    try:
        return read_rd_csv(path)
    except CsvFormatError as exc:
        raise CliError(str(exc), EXIT_MISSING) from exc


def cmd_bd_rate(args) -> int:
    anchor = _read_curve(args.anchor)
    test = _read_curve(args.test)
    try:
        value = bd_rate(anchor, test)
    except NoOverlapError as exc:
        raise CliError(str(exc), EXIT_NO_OVERLAP) from exc
    except CurveError as exc:
        raise CliError(str(exc), EXIT_MISSING) from exc
    print(f"{value:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auxcodec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress a PPM image")
    p.add_argument("--input", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--config")
    p.add_argument("--output", required=True)
    p.add_argument("--report", action="store_true",
                   help=f"print a CSV line: {REPORT_COLUMNS}")
    p.add_argument("--verify", action="store_true",
                   help="decode the result and check it matches the encoder side")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a container to PPM")
    p.add_argument("--input", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--config")
    p.add_argument("--output", required=True)
    p.add_argument("--verify", metavar="REFERENCE_PPM",
                   help="re-encode the reference and check the stream is reproduced")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("inspect", help="dump and validate a container header")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="train on synthetic patches and write weights")
    p.add_argument("--config")
    p.add_argument("--output", required=True, help="weight file to write")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--patches", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--trace", help="loss trace CSV")
    p.add_argument("--checkpoint", help="resumable checkpoint (.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-curve", help="RD points for a set of weight files")
    p.add_argument("--inputs", required=True, help="directory of .ppm images")
    p.add_argument("--weights-list", required=True, help="lines of 'lambda,weights_path'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_curve)

    p = sub.add_parser("bd-rate", help="BD-rate of --test against --anchor")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_bd_rate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except container.ConfigMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except container.TruncatedStreamError as exc:
        print(f"error: truncated stream: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ContainerError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CodecError, FloatingPointError, RuntimeError) as exc:
        # encoder-side invariant failures and training divergence
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
