"""Command-line entry point: ``srvit {generate,train,eval,attribute,inspect}``.

Exit codes: 0 success, 1 usage/configuration error, 2 data/format/I-O error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ConfigurationError, DataError, NumericalError
from .fields import SyntheticSceneSpec, iter_gfd_headers, read_gfd, write_gfd, write_pgm
from .model import SRViT

log = logging.getLogger("srvit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def _size(text):
    parts = text.lower().split("x")
    if len(parts) == 1:
        parts = parts * 2
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None
    return h, w


def _thresholds(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None


def _override(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    from .dataset import write_dataset

    spec = SyntheticSceneSpec(seed=args.seed, n_cells=args.n_cells, size=args.size,
                              patch_size=args.patch_size)
    rows = write_dataset(args.out, args.count, spec, args.min_cov, args.max_cov)
    accepted = [r for r in rows if r["accepted"]]
    cov = np.mean([float(r["nonzero_fraction"]) for r in rows]) if rows else float("nan")
    print(f"wrote {len(rows)} samples ({len(accepted)} accepted, mean coverage {cov:.4f}) "
          f"to {args.out}")
    return EXIT_OK


def _run_config(args) -> cfgmod.RunConfig:
    base = cfgmod.PRESETS[args.preset]
    overrides = {}
    for key, text in args.set or []:
        overrides[key] = cfgmod.parse_value(key, text)
    for key in cfgmod.KEYS:
        text = getattr(args, f"key_{key}", None)
        if text is not None:
            overrides[key] = cfgmod.parse_value(key, text)
    if args.config:
        return cfgmod.load(args.config, overrides, base)
    return cfgmod.build(overrides, base)


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .dataset import load_dataset
    from .report import write_training
    from .train import fit

    run = _run_config(args)
    data = load_dataset(args.data)
    model_cfg = replace(run.model, in_channels=data.inputs.shape[1])
    try:
        model_cfg.check_image(data.inputs.shape)
    except ConfigurationError as exc:
        raise DataError(f"data does not fit the model: {exc}") from None
    train_set, val_set = data.split(run.val_fraction)
    report = fit(model_cfg, (train_set.inputs, train_set.targets),
                 (val_set.inputs, val_set.targets), run.train, run.loss)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(SRViT(model_cfg, report.params), out / "model.gfd")
    cfgmod.save(replace(run, model=model_cfg), out / "run.cfg")
    write_training(report, out)
    print(f"trained {report.steps} steps over {len(report.train_loss)} epochs; best epoch "
          f"{report.best_epoch + 1} (val loss {report.best_val_loss:.6g})")
    print(f"wall clock {report.wall_clock:.1f}s", file=sys.stderr)
    return EXIT_OK


def _load_model(path) -> SRViT:
    from .checkpoint import load_checkpoint

    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _evaluate(model: SRViT, data, thresholds):
    from .metrics import evaluate

    try:
        model.config.check_image(data.inputs.shape)
    except ConfigurationError as exc:
        raise DataError(f"checkpoint does not fit the data: {exc}") from None
    return evaluate(model, data.inputs, data.targets, thresholds,
                    patch_size=model.config.patch_size)


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .plotting import plot_prediction
    from .report import write_evaluation

    model = _load_model(args.checkpoint)
    data = load_dataset(args.data)
    ev = _evaluate(model, data, args.thresholds)
    compare = None
    if args.compare:
        compare = (args.compare_label, _evaluate(_load_model(args.compare), data, args.thresholds))
    result = write_evaluation(ev, data.sample_ids, args.out, args.label, compare)
    for i in range(min(args.previews, len(data))):
        plot_prediction(data.inputs[i], ev.predictions[i], data.targets[i, 0],
                        data.channel_names, Path(args.out) / f"preview_{data.sample_ids[i]}.png")
    print(f"rmse {ev.rmse:.4f} dBZ  r2 {ev.r2:.4f}  g {ev.sharpness.mean:.4f} "
          f"+/- {ev.sharpness.std:.4f}  patchiness {ev.patchiness:.4f}")
    if "welch" in result:
        wt = result["welch"]
        print(f"welch t {wt.t:.4f}  dof {wt.dof:.2f}  p {wt.p_value:.3g}")
    return EXIT_OK


def _token(text, grid):
    from .attribution import TokenSelector

    try:
        parts = [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigurationError(f"token must be ROW,COL or an index, got {text!r}") from None
    if len(parts) == 1:
        return TokenSelector.from_index(parts[0], grid)
    if len(parts) != 2:
        raise ConfigurationError(f"token must be ROW,COL or an index, got {text!r}")
    sel = TokenSelector(*parts)
    sel.index(grid)
    return sel


def cmd_attribute(args) -> int:
    from .attribution import attribution_map, mean_redistribution
    from .fields import GridField
    from .plotting import plot_attribution

    model = _load_model(args.checkpoint)
    sample = read_gfd(args.sample)
    try:
        model.config.check_image(sample.values.shape)
    except ConfigurationError as exc:
        raise DataError(f"sample does not fit the checkpoint: {exc}") from None
    p = model.config.patch_size
    grid = (sample.height // p, sample.width // p)
    sel = _token(args.token, grid)
    blocks = None if args.block is None else [args.block]
    attr = mean_redistribution(model, sample.values, blocks, args.transpose, args.reduction)
    amap = attribution_map(attr, sel)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_gfd(amap, out / "attribution.gfd")
    write_pgm(amap.values[0], out / "attribution.pgm")
    write_gfd(GridField(attr.U[None], ("U",)), out / "redistribution.gfd")
    meta = {
        "token_row": sel.row, "token_col": sel.col, "token_index": sel.index(grid),
        "blocks": ",".join(str(b) for b in attr.block_ids),
        "orientation": "column" if attr.transposed else "row",
        "reduction": attr.reduction, "patch_size": p,
        "grid": f"{grid[0]}x{grid[1]}",
    }
    (out / "attribution.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    background = sample.values[0]
    plot_attribution(background, amap.values[0], (sel.row, sel.col), p, out / "attribution.png")
    print(f"token ({sel.row}, {sel.col}) over blocks {meta['blocks']} -> {out}")
    return EXIT_OK


def format_header(offset, hdr) -> str:
    lines = [
        f"record @ {offset}",
        "  magic: GFD1",
        f"  version: {hdr.version}",
        f"  normalized: {'true' if hdr.normalized else 'false'}",
        f"  channels: {hdr.channels}",
        f"  height: {hdr.height}",
        f"  width: {hdr.width}",
        f"  channel_names: {','.join(hdr.channel_names)}",
        f"  payload_bytes: {hdr.payload_bytes}",
    ]
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    from .checkpoint import sidecar_path

    path = Path(args.path)
    if not path.is_file():
        raise DataError(f"{path} is not a file")
    for offset, hdr in iter_gfd_headers(path):
        print(format_header(offset, hdr))
    side = sidecar_path(path)
    if side.exists():
        print(f"config ({side.name}):")
        for line in side.read_text().splitlines():
            print(f"  {line}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srvit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS worker cap (default: $SRVIT_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a seeded synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=_size, default=(64, 64), help="N or HxW pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-cells", type=int, default=SyntheticSceneSpec.n_cells)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--min-cov", type=float, default=0.01)
    p.add_argument("--max-cov", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default="smoke",
                   help="base configuration the file and overrides apply to")
    p.add_argument("--set", action="append", type=_override, metavar="KEY=VALUE")
    keys = p.add_argument_group("configuration keys")
    for key in cfgmod.KEYS:
        keys.add_argument(f"--{key.replace('_', '-')}", dest=f"key_{key}", metavar="VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="verification metrics, figures and previews")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", type=_thresholds, default=[5, 10, 15, 20, 25, 30, 35, 40])
    p.add_argument("--compare", help="second checkpoint for a sharpness t-test")
    p.add_argument("--label", default="SRViT")
    p.add_argument("--compare-label", default="Base-ViT")
    p.add_argument("--previews", type=int, default=2, help="number of preview figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attribute", help="Token (Re)Distribution map for one token")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="input GFD file")
    p.add_argument("--token", required=True, help="ROW,COL on the patch grid or linear index")
    p.add_argument("--block", type=int, default=None, help="single block (0-based)")
    p.add_argument("--transpose", action="store_true", help="column orientation of U")
    p.add_argument("--reduction", choices=("sum_abs", "l1"), default="sum_abs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("inspect", help="print GFD headers and checkpoint config")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or int(os.environ.get("SRVIT_THREADS", "1"))
    try:
        with _thread_limit(threads):
            return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
