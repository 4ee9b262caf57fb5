"""Command line entry points.

Exit codes: 0 success, 2 usage/configuration, 3 data/IO, 4 numeric failure.
``SAMESTAGE_OUTPUT_ROOT`` overrides where runs are created when ``--out`` is relative.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import config as config_mod
from .errors import ConfigurationError, DataError, SameStageError

log = logging.getLogger("samestage")

OUTPUT_ROOT_ENV = "SAMESTAGE_OUTPUT_ROOT"


def _output_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def parse_overrides(extra: list[str]) -> dict:
    """``--dag.beta 0 --generator.base_width=16`` -> ``{"dag.beta": 0, "generator.base_width": 16}``."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigurationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigurationError(f"flag {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out[key.replace("-", "_") if "." not in key else key] = config_mod.parse_value(value)
    return out


def cmd_train(args, extra) -> int:
    from .data import ImageFolder, UnpairedDataset
    from .training import fit, write_run_metadata

    overrides = parse_overrides(extra)
    for name in ("epochs", "seed"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    if args.data is not None:
        overrides["data.root"] = args.data
    file_data = config_mod.load_file(args.config) if args.config else {}
    run = config_mod.resolve(file_data, overrides)
    if not run.data.root:
        raise ConfigurationError("no dataset given: pass --data ROOT or set data.root in the config")
    root = Path(run.data.root)
    if args.config and not root.is_absolute() and not root.exists():
        candidate = Path(args.config).parent / root
        if candidate.exists():
            root = candidate
    data = UnpairedDataset.from_root(
        root, image_size=run.data.image_size, shuffle_seed=run.data.shuffle_seed,
        batch_size=run.train.batch_size, flip=run.data.flip, cache=run.data.cache,
    )
    test = None
    if (root / "testA").is_dir() and (root / "testB").is_dir():
        n = run.train.fid_samples
        test = (ImageFolder(root / "testA", run.data.image_size).stack(n),
                ImageFolder(root / "testB", run.data.image_size).stack(n))
    out = _output_dir(args.out)
    write_run_metadata(out, run.to_dict(), run.train.seed)
    paths = fit(run.train, data, out, resume=args.resume, test_data=test)
    print(f"wrote {len(paths)} checkpoint(s); final: {paths[-1]}")
    return 0


def cmd_translate(args, extra) -> int:
    from .data import list_images, load_image, save_image
    from .training import load_checkpoint, read_checkpoint, translate_batch

    ckpt = read_checkpoint(args.checkpoint)
    if args.config:
        run = config_mod.resolve(config_mod.load_file(args.config), parse_overrides(extra))
        if config_mod.config_hash(run.train) != ckpt["config_hash"]:
            raise ConfigurationError(
                f"config {args.config} does not match checkpoint {args.checkpoint} (architecture hash differs)"
            )
    state = load_checkpoint(args.checkpoint)
    files = list_images(args.input)
    out = _output_dir(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        img = load_image(f, args.image_size).unsqueeze(0)
        fake = translate_batch(state.G, img.to(state.device))[0].cpu()
        save_image(fake, out / f.name)
    print(f"translated {len(files)} image(s) into {out}")
    return 0


def cmd_evaluate(args, extra) -> int:
    from .data import ImageFolder
    from .evaluation import FeatureStats, extract_features, fid, make_extractor

    extractor = make_extractor(args.extractor)
    size = args.image_size or (64 if args.extractor in ("builtin", "random") else 299)
    feats = {}
    for name, folder in (("real", args.real), ("fake", args.fake)):
        images = ImageFolder(folder, size, cache=False).stack()
        feats[name] = extract_features(images, extractor)
    value = fid(FeatureStats.from_features(feats["real"]), FeatureStats.from_features(feats["fake"]))
    result = {"fid": value, "n_real": len(feats["real"]), "n_fake": len(feats["fake"]),
              "extractor": args.extractor, "image_size": size}
    print(f"FID: {value:.6f}")
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(json.dumps(result, indent=2))
    return 0


def cmd_synth_toy(args, extra) -> int:
    from .data import ToyDomainSpec, synth_toy

    spec = ToyDomainSpec(size=args.size, n_images=args.n_images, n_test=args.n_test,
                         hue_rotation=args.hue_rotation, seed=args.seed)
    out = synth_toy(spec, _output_dir(args.out))
    print(f"wrote toy dataset to {out}")
    return 0


def cmd_inspect_sampling(args, extra) -> int:
    from .evaluation import read_history, sampling_frequency_map, save_heatmap

    history = read_history(args.history)
    if args.every:
        history = [r for r in history if r["iteration"] % args.every == 0]
    records = [r for r in history if args.tap is None or r["tap"] == args.tap]
    if not records:
        raise DataError(f"no sampling records for tap {args.tap} in {args.history}")
    grid = tuple(records[0]["grid"])
    freq = sampling_frequency_map(records, grid, args.tap)
    path = save_heatmap(freq, _output_dir(args.out))
    print(f"{len(records)} record(s) on a {grid[0]}x{grid[1]} grid -> {path}")
    return 0


def cmd_weight_density(args, extra) -> int:
    from .evaluation import weight_density

    res = weight_density(args.checkpoint, args.component, _output_dir(args.out), bins=args.bins)
    print(f"{args.component}: n={res['n']} mean={res['mean']:.6f} std={res['std']:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samestage", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", allow_abbrev=False, help="train a translator (extra --dotted.key VALUE flags override config)")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset root with trainA/trainB[/testA/testB]")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train, allow_extra=True)

    p = sub.add_parser("translate", allow_abbrev=False, help="translate a folder of images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="optional config to verify against the checkpoint")
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_translate, allow_extra=True)

    p = sub.add_parser("evaluate", allow_abbrev=False, help="FID between two image folders")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--extractor", default="builtin", help="builtin | inception:PATH | torchscript:PATH")
    p.add_argument("--image-size", type=int)
    p.add_argument("--json", help="write the result as JSON here")
    p.set_defaults(func=cmd_evaluate, allow_extra=False)

    p = sub.add_parser("synth-toy", allow_abbrev=False, help="generate the hue-shift toy domains")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--hue-rotation", type=float, default=120.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_toy, allow_extra=False)

    p = sub.add_parser("inspect-sampling", allow_abbrev=False, help="render a sampling-frequency heatmap")
    p.add_argument("--history", required=True, help="sampling.jsonl from a run")
    p.add_argument("--tap", type=int)
    p.add_argument("--every", type=int, default=0, help="only use iterations divisible by this")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_sampling, allow_extra=False)

    p = sub.add_parser("weight-density", allow_abbrev=False, help="density of a checkpoint component's weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--component", required=True, help="e.g. heads.projections, generator")
    p.add_argument("--out", required=True, help="output prefix for .csv/.png")
    p.add_argument("--bins", type=int, default=100)
    p.set_defaults(func=cmd_weight_density, allow_extra=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if extra and not args.allow_extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except SameStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.exit_code == 2:
            parser.print_usage(sys.stderr)
        return exc.exit_code
    except torch.cuda.OutOfMemoryError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
