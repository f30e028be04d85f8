"""Command-line entry point: train, sample, eval, diagnose, autoencode, interpolate."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import diagnostics as diag
from . import sampler
from .models import GatedPixelCNN, ModelConfig, PixelCNNAutoencoder, PRESETS, preset
from .train import CheckpointError, TrainConfig, TrainingState, evaluate, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("gated_pixelcnn")

CHECKPOINT_NAME = "checkpoint.gpck"

CONFIG_HELP = """\
config file: plain text, one key=value per line, '#' starts a comment.
Keys are the long flag names without dashes (dashes or underscores both
work), e.g. 'steps=500' or 'batch-size=16'. Flags given on the command line
override the file. Keys accepted by each subcommand are exactly its flags.
"""


class UsageError(Exception):
    pass


def parse_dims(text: str):
    try:
        h, w = text.lower().split("x")
        dims = int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like HxW, got {text!r}") from None
    if min(dims) < 1:
        raise argparse.ArgumentTypeError("dims must be positive")
    return dims


def parse_point(text: str):
    try:
        y, x = text.lower().split("x")
        return int(y), int(x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"target must look like YxX, got {text!r}") from None


def read_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def read_vectors(path) -> np.ndarray:
    """Embedding file: one vector per line, space-separated decimals."""
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise UsageError(f"{path}: no vectors")
    if len({len(r) for r in rows}) != 1:
        raise UsageError(f"{path}: vectors have different lengths")
    try:
        return np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Parser


def _shared(p):
    p.add_argument("--config", metavar="PATH", help="key=value file; flags override it")
    p.add_argument("--seed", type=int, default=0, metavar="U64", help="master seed (default 0)")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory (default .)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _data_flags(p, default=None):
    p.add_argument("--dataset", choices=["mnist", "stripes", "brightness", "cifar"], default=default)
    p.add_argument("--data-dir", metavar="DIR", help="directory holding MNIST IDX or CIFAR .bin files")
    p.add_argument("--dims", type=parse_dims, default=(8, 8), metavar="HxW",
                   help="image size for synthetic corpora (default 8x8)")
    p.add_argument("--num-examples", type=int, default=1000, help="synthetic corpus size (default 1000)")
    p.add_argument("--levels", type=int, metavar="L", help="quantization levels (default: preset)")


def _model_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="mnist-small")
    p.add_argument("--layers", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--filter-size", type=int)
    p.add_argument("--activation", choices=["gated", "relu", "linear"])
    p.add_argument("--architecture", choices=["two_stack", "single_stack"])
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--init", choices=["random", "zero"], default="random",
                   help="'zero' builds an all-zero model (uniform predictions)")


def _train_flags(p):
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd_momentum"], default="adam")
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.gpck if present")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gated-pixelcnn", description=__doc__, epilog=CONFIG_HELP,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    p = sub.add_parser("train", help="train a model and write OUT/checkpoint.gpck", epilog=CONFIG_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _shared(p)
    _data_flags(p, default="mnist")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--conditional", choices=["none", "class", "embedding"], default="none")
    p.add_argument("--embedding-file", metavar="PATH",
                   help="per-training-image vectors for --conditional embedding")

    p = sub.add_parser("sample", help="draw images from a checkpoint into OUT/samples.png", epilog=CONFIG_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _shared(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--count", type=int, default=16)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--class", dest="class_id", type=int, metavar="ID")
    g.add_argument("--embedding-file", metavar="PATH", help="vectors, cycled over the samples")
    p.add_argument("--grid", type=int, default=4, metavar="COLS")
    p.add_argument("--temperature", type=float, default=1.0)

    p = sub.add_parser("eval", help="print held-out bits/dim", epilog=CONFIG_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _shared(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    _data_flags(p)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int, help="score at most this many images")

    p = sub.add_parser("diagnose", help="architecture checks", epilog=CONFIG_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _shared(p)
    p.add_argument("check", choices=["causality", "receptive-field", "blindspot", "gradients"])
    p.add_argument("--preset", choices=sorted(PRESETS), default="mnist-small")
    p.add_argument("--dims", type=parse_dims, default=None, metavar="HxW")
    p.add_argument("--channels", type=int, choices=[1, 3], default=None)
    p.add_argument("--arch", choices=["two_stack", "single_stack"], default=None)
    p.add_argument("--depth", type=int, default=None, metavar="K")
    p.add_argument("--filter", type=int, default=None, metavar="N")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--target", type=parse_point, default=None, metavar="YxX",
                   help="target pixel (default: image centre)")
    p.add_argument("--samples", type=int, default=200, help="parameters probed by 'gradients'")
    p.add_argument("--linear", action="store_true", help="'gradients': audit the linear-only control")

    p = sub.add_parser("autoencode", help="train a PixelCNN autoencoder and write reconstructions",
                       epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _shared(p)
    _data_flags(p, default="mnist")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--bottleneck", type=int, default=10, metavar="M")
    p.add_argument("--count", type=int, default=8, help="reconstructions to draw")

    p = sub.add_parser("interpolate", help="sample along a line between two embeddings", epilog=CONFIG_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _shared(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--a", required=True, metavar="PATH", help="embedding file (first vector used)")
    p.add_argument("--b", required=True, metavar="PATH")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--temperature", type=float, default=1.0)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser.subcommands[args.command]
        values = read_config_file(args.config)
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in values.items():
            if key in ("config", "help") or key not in known:
                raise UsageError(f"{args.config}: unknown key {key!r} for '{args.command}'")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
                continue
            value = action.type(raw) if action.type else raw
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{args.config}: {key}={raw} not in {sorted(action.choices)}")
            defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# Data and model assembly


def load_dataset(args, split: str, levels: int, size=None) -> D.Dataset:
    kind = args.dataset
    if kind is None:
        raise UsageError("--dataset is required")
    if kind in ("stripes", "brightness"):
        full = D.make_synthetic("stripes_hv" if kind == "stripes" else "brightness_2class",
                                args.num_examples, dims=args.dims, seed=0, levels=levels)
        train, test = full.split(0.2, seed=0)
        return train if split == "train" else test
    if args.data_dir is None:
        raise UsageError(f"--data-dir is required for --dataset {kind}")
    directory = Path(args.data_dir)
    if not directory.is_dir():
        raise UsageError(f"data directory {directory} does not exist")
    if kind == "mnist":
        return D.load_mnist(directory, split, levels, size=size)
    names = sorted(directory.glob("data_batch_*.bin")) if split == "train" else [directory / "test_batch.bin"]
    parts = [D.load_cifar_binary(p, levels) for p in names if p.exists()]
    if not parts:
        raise UsageError(f"no CIFAR-10 {split} batches in {directory}")
    return D.Dataset(np.concatenate([p.images for p in parts]), levels,
                     np.concatenate([p.labels for p in parts]), num_classes=10)


def model_config(args, train: D.Dataset = None, cond_dim: int = 0) -> ModelConfig:
    over = {k: getattr(args, k) for k in ("layers", "features", "filter_size", "activation", "architecture")
            if getattr(args, k, None) is not None}
    over["dtype"] = args.dtype
    if args.levels is not None:
        over["levels"] = args.levels
    if train is not None:
        c, h, w = train.shape
        over.update(channels=c, height=h, width=w)
    if cond_dim:
        over.update(conditioning="global", cond_dim=cond_dim)
    cfg = preset(args.preset)
    if over.get("channels", cfg.channels) != cfg.channels and "features" not in over:
        c = over["channels"]
        over["features"] = max(c, cfg.features // c * c)
    return cfg.replace(**over)


def _levels(args) -> int:
    return args.levels if args.levels is not None else PRESETS[args.preset].levels


def _train_config(args) -> TrainConfig:
    return TrainConfig(optimizer=args.optimizer, lr=args.lr, batch_size=args.batch_size, steps=args.steps,
                       seed=args.seed, eval_every=min(args.eval_every, max(1, args.steps)),
                       clip_norm=args.clip_norm)


def _run_training(args, model, train, test, out: Path):
    ckpt = out / CHECKPOINT_NAME
    cfg = _train_config(args)
    state = None
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt, model.cfg.fingerprint())
        model = state.model
        log.info("resuming from step %d", state.step)
    state = fit(model, train, cfg, test, state=state, checkpoint_path=ckpt)
    save_checkpoint(state, ckpt)
    with open(out / "history.tsv", "w") as f:
        f.write("step\ttrain_bits_per_dim\teval_bits_per_dim\n")
        for step, tr, ev in state.history:
            f.write(f"{step}\t{tr:.6f}\t{ev:.6f}\n")
    return state, ckpt


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    levels = _levels(args)
    size = PRESETS[args.preset].height if args.dataset == "mnist" else None
    train = load_dataset(args, "train", levels, size)
    test = load_dataset(args, "test", levels, size)
    cond_dim = 0
    if args.conditional == "class":
        cond_dim = max(train.num_classes, test.num_classes)
        if cond_dim < 1:
            raise UsageError("--conditional class needs a labelled dataset")
        train.num_classes = test.num_classes = cond_dim
    elif args.conditional == "embedding":
        if not args.embedding_file:
            raise UsageError("--conditional embedding needs --embedding-file")
        vecs = read_vectors(args.embedding_file)
        if len(vecs) != len(train) + len(test):
            raise UsageError(f"{args.embedding_file}: {len(vecs)} vectors for {len(train) + len(test)} images "
                             "(train images first, then test)")
        train.embeddings, test.embeddings = vecs[:len(train)], vecs[len(train):]
        cond_dim = vecs.shape[1]
    cfg = model_config(args, train, cond_dim)
    model = GatedPixelCNN(cfg, seed=args.seed, zero=args.init == "zero")
    log.info("model: %d parameters", model.num_parameters())
    state, ckpt = _run_training(args, model, train, test, out)
    final = state.history[-1][2] if state.history else evaluate(state.model, test)
    print(f"checkpoint: {ckpt}")
    print(f"eval_bits_per_dim: {final:.4f}")
    return 0


def _load(path) -> TrainingState:
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _write_grid(images, levels, columns, path) -> tuple:
    return D.write_png_grid(D.dequantize(images, levels), columns, path)


def cmd_sample(args) -> int:
    state = _load(args.checkpoint)
    model = state.model
    if isinstance(model, PixelCNNAutoencoder):
        raise UsageError("sample needs a PixelCNN checkpoint; use autoencode for autoencoders")
    cfg = model.cfg
    cond = None
    if cfg.conditioning != "none":
        if args.class_id is not None:
            if not 0 <= args.class_id < cfg.cond_dim:
                raise UsageError(f"--class must lie in [0, {cfg.cond_dim})")
            cond = np.eye(cfg.cond_dim)[np.full(args.count, args.class_id)]
        elif args.embedding_file:
            vecs = read_vectors(args.embedding_file)
            cond = vecs[np.arange(args.count) % len(vecs)]
        else:
            raise UsageError("conditional model: pass --class or --embedding-file")
        if cond.shape[1] != cfg.cond_dim:
            raise UsageError(f"conditioning vectors have dim {cond.shape[1]}, model expects {cfg.cond_dim}")
    elif args.class_id is not None or args.embedding_file:
        raise UsageError("model is unconditional; --class/--embedding-file do not apply")
    images = sampler.sample(model, args.count, cond, seed=args.seed, temperature=args.temperature).images
    path = Path(args.out) / "samples.png"
    h, w = _write_grid(images, cfg.levels, args.grid, path)
    print(f"wrote {path} ({h}x{w})")
    return 0


def cmd_eval(args) -> int:
    state = _load(args.checkpoint)
    model = state.model
    cfg = model.cfg
    if args.levels is not None and args.levels != cfg.levels:
        raise UsageError(f"checkpoint uses L={cfg.levels}, --levels says {args.levels}")
    if args.dataset in ("stripes", "brightness"):
        args.dims = (cfg.height, cfg.width)
    size = cfg.height if args.dataset == "mnist" else None
    ds = load_dataset(args, args.split, cfg.levels, size)
    if ds.shape != (cfg.channels, cfg.height, cfg.width):
        raise UsageError(f"dataset images are {ds.shape}, model expects {(cfg.channels, cfg.height, cfg.width)}")
    if cfg.conditioning != "none" and not isinstance(model, PixelCNNAutoencoder):
        ds.num_classes = cfg.cond_dim
    bpd = evaluate(model, ds, limit=args.limit)
    print(f"bits_per_dim: {bpd:.4f}")
    return 0


def cmd_diagnose(args) -> int:
    base = preset(args.preset, dtype="float64")
    over = {}
    if args.dims:
        over.update(height=args.dims[0], width=args.dims[1])
    elif args.check == "causality":
        over.update(height=8, width=8)
    if args.channels:
        over["channels"] = args.channels
        if base.features % args.channels:
            over["features"] = base.features // args.channels * args.channels
    if args.arch:
        over["architecture"] = args.arch
    if args.depth is not None:
        over["layers"] = max(1, args.depth)
    if args.filter:
        over["filter_size"] = args.filter
    cfg = base.replace(**over)
    target = args.target or (cfg.height // 2, cfg.width // 2)

    if args.check == "causality":
        found = diag.causality_check(cfg, trials=args.trials, tolerance=0.0, seed=args.seed)
        for v in found[:20]:
            print(f"violation: trial {v.trial} target {v.target} source {v.source} delta {v.delta:.3g}")
        print(f"violations: {len(found)}")
        return 0 if not found else 1
    if args.check in ("receptive-field", "blindspot"):
        depth = args.depth if args.depth is not None else cfg.layers
        oracle = diag.blind_spot_oracle(cfg.architecture, depth, cfg.filter_size, (cfg.height, cfg.width), target)
        if args.check == "receptive-field":
            model = GatedPixelCNN(cfg, seed=args.seed)
            grid = diag.receptive_field_map(model, target, seed=args.seed).grid
            print(_render(grid, target))
            print(f"matches_oracle: {str(bool((grid == oracle).all())).lower()}")
        else:
            grid = oracle
            print(_render(grid, target))
        print(f"missing_fraction: {diag.missing_fraction(grid, target):.4f}")
        return 0
    audit_cfg = cfg.replace(activation="linear") if args.linear else cfg
    err = diag.gradient_audit(audit_cfg, samples=args.samples, seed=args.seed,
                              loss="probe" if args.linear else "nll")
    print(f"max_relative_error: {err:.3e}")
    return 0


def _render(grid, target) -> str:
    rows = []
    for y, row in enumerate(grid):
        rows.append("".join("T" if (y, x) == tuple(target[:2]) else ("#" if v else ".") for x, v in enumerate(row)))
    return "\n".join(rows)


def cmd_autoencode(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    levels = _levels(args)
    size = PRESETS[args.preset].height if args.dataset == "mnist" else None
    train = load_dataset(args, "train", levels, size)
    test = load_dataset(args, "test", levels, size)
    cfg = model_config(args, train).replace(bottleneck=args.bottleneck)
    ae = PixelCNNAutoencoder(cfg, seed=args.seed, zero=args.init == "zero")
    state, ckpt = _run_training(args, ae, train, test, out)
    ae = state.model
    originals = test.images[:args.count]
    h = ae.encoder(originals).data
    recon = sampler.sample(ae.decoder, len(originals), h, seed=args.seed).images
    path = out / "reconstructions.png"
    _write_grid(np.concatenate([originals, recon]), cfg.levels, len(originals), path)
    np.savetxt(out / "embeddings.txt", h, fmt="%.8g")
    print(f"checkpoint: {ckpt}")
    print(f"wrote {path}")
    print(f"eval_bits_per_dim: {evaluate(ae, test):.4f}")
    return 0


def cmd_interpolate(args) -> int:
    state = _load(args.checkpoint)
    model = state.model
    if isinstance(model, PixelCNNAutoencoder):
        model = model.decoder
    if model.cfg.conditioning == "none":
        raise UsageError("interpolation needs a conditional model")
    h_a, h_b = read_vectors(args.a)[0], read_vectors(args.b)[0]
    if len(h_a) != model.cfg.cond_dim or len(h_b) != model.cfg.cond_dim:
        raise UsageError(f"embeddings must have dim {model.cfg.cond_dim}")
    images = sampler.sample_interpolation(model, h_a, h_b, args.steps, seed=args.seed,
                                          temperature=args.temperature)
    path = Path(args.out) / "interpolation.png"
    h, w = _write_grid(images, model.cfg.levels, args.steps, path)
    print(f"wrote {path} ({h}x{w})")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "autoencode": cmd_autoencode,
    "interpolate": cmd_interpolate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"gated-pixelcnn: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, CheckpointError, D.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"gated-pixelcnn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
