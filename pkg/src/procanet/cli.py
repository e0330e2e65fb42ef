"""Command-line entry point: synth, train, eval, predict, gradcheck, bench."""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import NODATA, PATCH, TEST_STRIDE, TRAIN_STRIDE, Raster, load_raster, \
    load_scenes, patch_offsets, save_raster, select_bands, write_synthetic
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .losses import confusion_counts, metrics_report, predict_mask
from .model import ModelConfig, load_weights, predict_logits
from .tensor import ConvKernel, conv2d_fast, conv2d_naive, set_num_threads
from .training import TrainConfig, build_patches, evaluate, fit, split_scenes

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4, 5


@dataclass
class RunManifest:
    command: str
    seed: int
    output: str
    data: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, directory) -> Path:
        path = Path(directory) / "run.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def predict_stitch(params, config: ModelConfig, raster: Raster, patch: int = PATCH,
                   stride: int = TEST_STRIDE, scale: float = 1.0, batch_size: int = 8) -> Raster:
    """Tile the scene, threshold each tile's logits at 0 and paste the tiles back.

    Pixels no full tile covers keep the 255 marker.
    """
    rows = patch_offsets(raster.height, patch, stride)
    cols = patch_offsets(raster.width, patch, stride)
    a = select_bands(raster, config.encoder1_bands, scale)
    b = select_bands(raster, config.encoder2_bands, scale) if config.dual else None
    windows = [(r, c) for r in rows for c in cols]
    x1 = np.stack([a[:, r:r + patch, c:c + patch] for r, c in windows])
    x2 = None if b is None else np.stack([b[:, r:r + patch, c:c + patch] for r, c in windows])
    masks = predict_mask(predict_logits(params, config, x1, x2, batch_size))
    out = np.full((1, raster.height, raster.width), NODATA, np.float32)
    for (r, c), m in zip(windows, masks):
        out[0, r:r + patch, c:c + patch] = m[0]
    return Raster(out, ("mask",))


# -- argument parsing ---------------------------------------------------------

def _bands(text: str):
    if text.lower() == "none":
        return None
    bands = tuple(b.strip() for b in text.split(",") if b.strip())
    if not bands:
        raise argparse.ArgumentTypeError("band list must not be empty")
    return bands


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="procanet", description=__doc__)
    p.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    p.add_argument("--threads", type=int, default=0,
                   help="worker threads, 0 = all cores; results do not depend on it")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic scene/label raster pairs")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train on a scene directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=25)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--base-channels", type=int, default=16)
    t.add_argument("--levels", type=int, default=4)
    t.add_argument("--attention", type=_on_off, default=True, metavar="on|off")
    t.add_argument("--encoder1-bands", type=_bands, default=("R", "G", "B", "NIR"))
    t.add_argument("--encoder2-bands", type=_bands, default=("NIR",), metavar="BANDS|none")
    t.add_argument("--train-fraction", type=float, default=0.65)
    t.add_argument("--scale", type=float, default=1.0,
                   help="divide band values by this before clamping to [0, 1]")

    e = sub.add_parser("eval", help="metrics JSON for a checkpoint or a mask")
    e.add_argument("--weights", help="weights file; model config comes from run.json")
    e.add_argument("--run", help="run.json of the training run (default: next to --weights)")
    e.add_argument("--input", help="scene directory (with --weights) or label raster (with --mask)")
    e.add_argument("--split", choices=("train", "val", "all"), default="all")
    e.add_argument("--mask", help="predicted mask raster to score against --input")
    e.add_argument("--out", help="write the JSON here as well as to stdout")

    pr = sub.add_parser("predict", help="stitched water mask for one scene")
    pr.add_argument("--weights", required=True)
    pr.add_argument("--run")
    pr.add_argument("--input", required=True)
    pr.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--h", type=float, default=1e-2)
    g.add_argument("--tol", type=float, default=1e-2)
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--attention", type=_on_off, default=True, metavar="on|off")

    b = sub.add_parser("bench", help="naive vs im2col convolution throughput")
    b.add_argument("--repeats", type=int, default=3)
    return p


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    RunManifest("synth", args.seed, args.out,
                config={"count": args.count, "width": args.width, "height": args.height}
                ).write(args.out)
    write_synthetic(args.out, args.count, args.seed, args.width, args.height)
    return EXIT_OK


def _model_config(args) -> ModelConfig:
    return ModelConfig(levels=args.levels, base_channels=args.base_channels,
                       encoder1_bands=args.encoder1_bands, encoder2_bands=args.encoder2_bands,
                       attention_enabled=args.attention, seed=args.seed)


def cmd_train(args) -> int:
    model_config = _model_config(args)
    train_config = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr_max=args.lr,
                               seed=args.seed, max_steps=args.max_steps)
    if not 0 < args.train_fraction < 1:
        raise ConfigError("--train-fraction must be in (0, 1)")
    scenes = load_scenes(args.data)
    train_ids, val_ids = split_scenes(len(scenes), args.train_fraction, args.seed)
    RunManifest("train", args.seed, args.out, data=[str(Path(args.data).resolve())], config={
        "model": model_config.to_dict(), "train": train_config.to_dict(),
        "train_fraction": args.train_fraction, "scale": args.scale,
        "train_scenes": train_ids, "val_scenes": val_ids,
    }).write(args.out)
    train = build_patches([scenes[i] for i in train_ids], model_config, TRAIN_STRIDE, True,
                          args.scale)
    val = build_patches([scenes[i] for i in val_ids], model_config, TEST_STRIDE, False,
                        args.scale)
    result = fit(model_config, train_config, train, val, out_dir=args.out,
                 on_epoch=lambda r: print(json.dumps(r), file=sys.stderr, flush=True))
    print(json.dumps({"best_val_iou": result.best_val_iou, "best_epoch": result.best_epoch,
                      "steps": result.steps}))
    return EXIT_OK


def _load_model(weights, run):
    run_path = Path(run) if run else Path(weights).with_name("run.json")
    if not run_path.exists():
        raise FileNotFoundError(f"run manifest {run_path} not found; pass --run")
    manifest = RunManifest.read(run_path)
    config = ModelConfig.from_dict(manifest.config["model"])
    return load_weights(weights, config), config, manifest


def _emit(report: dict, out) -> None:
    text = json.dumps(report)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_eval(args) -> int:
    if args.mask:
        if not args.input:
            raise ConfigError("--mask needs --input pointing at a label raster")
        pred, label = load_raster(args.mask), load_raster(args.input)
        if pred.data.shape != label.data.shape:
            raise ShapeError(f"mask {pred.data.shape} and labels {label.data.shape} differ")
        valid = (label.data != NODATA) & (pred.data != NODATA)
        _emit(metrics_report(confusion_counts(pred.data == 1, label.data == 1, valid)), args.out)
        return EXIT_OK
    if not args.weights or not args.input:
        raise ConfigError("eval needs --weights and --input (or --mask and --input)")
    params, config, manifest = _load_model(args.weights, args.run)
    scenes = load_scenes(args.input)
    if args.split == "train":
        scenes = [scenes[i] for i in manifest.config["train_scenes"]]
    elif args.split == "val":
        scenes = [scenes[i] for i in manifest.config["val_scenes"]]
    data = build_patches(scenes, config, TEST_STRIDE, False, manifest.config.get("scale", 1.0))
    _emit(metrics_report(evaluate(params, config, data)), args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    params, config, manifest = _load_model(args.weights, args.run)
    raster = load_raster(args.input)
    mask = predict_stitch(params, config, raster, scale=manifest.config.get("scale", 1.0))
    save_raster(mask, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import layer_suite, network_check

    ok = True
    for name, report in layer_suite(args.seed).items():
        print(f"layer {name:<12} {report}")
        ok &= report.passed
    t = time.perf_counter()
    report = network_check(args.seed, h=args.h, tol=args.tol, n_samples=args.samples,
                           attention=args.attention)
    print(f"network {'attention' if args.attention else 'plain':<10} {report} "
          f"[{time.perf_counter() - t:.1f}s]")
    if not report.passed:
        print(f"worst coordinate: {report.worst}; {len(report.failures)} over tolerance")
    ok &= report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


BENCH_SHAPES = [(1, 16, 128, 128, 16, 3), (1, 4, 128, 128, 16, 3), (2, 32, 64, 64, 32, 3),
                (1, 16, 128, 128, 1, 1)]


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    print(f"{'input':<18} {'kernel':<12} {'naive ms':>10} {'fast ms':>10} {'speedup':>8}")
    for n, c, h, w, co, k in BENCH_SHAPES:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        kern = ConvKernel(rng.standard_normal((co, c, k, k)), rng.standard_normal(co))
        conv2d_fast(x, kern)  # compile outside the timed region
        naive = _best_time(lambda: conv2d_naive(x, kern), args.repeats)
        fast = _best_time(lambda: conv2d_fast(x, kern), args.repeats)
        print(f"{str((n, c, h, w)):<18} {f'{co}x{c}x{k}x{k}':<12} {naive * 1e3:>10.2f} "
              f"{fast * 1e3:>10.2f} {naive / fast:>8.1f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on usage errors
    try:
        if args.threads < 0:
            raise ConfigError("--threads must be >= 0")
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        set_num_threads(args.threads)
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
