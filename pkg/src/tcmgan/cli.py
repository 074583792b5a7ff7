"""Command-line entry point: ``tcmgan <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
failure. Errors go to stderr and end with one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .boostpipe import Condition, run_boost
from .datapipe import load_split
from .datapipe.volumes import Modality
from .errors import ConfigError, DataLeakError, MissingModality
from .losses import Mode
from .trainer import load_network, predict, pretrain_segmentor, save_network

log = logging.getLogger("tcmgan")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _config(args) -> pipeline.RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = pipeline.RunConfig.load(path)
    else:
        cfg = pipeline.phantom_run_config()
    if args.seed is not None:
        cfg.reseed(args.seed)
    if getattr(args, "mode", None):
        cfg.train.mode = pipeline.MODE_NAMES[args.mode].value
    cfg.train.device = args.device
    cfg.boost.device = args.device
    cfg.validate()
    return cfg


def _out(args, cfg, default_sub: str = "") -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir) / default_sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _named_ckpts(values) -> list[tuple[str, Path]]:
    """``NAME=PATH`` or bare ``PATH``; bare paths get an empty name."""
    out = []
    for v in values or []:
        name, _, path = v.rpartition("=")
        out.append((name, Path(path)))
    return out


def _load(path: Path):
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_network(path)


# -- commands ----------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path(cfg.data_dir)
    subjects, checksum = pipeline.generate_phantoms(cfg, out)
    print(f"subjects: {len(subjects)}")
    print(f"checksum: {checksum}")
    _emit({"command": "phantom-gen", "subjects": len(subjects), "checksum": checksum, "out": str(out)})
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    data = Path(args.data) if args.data else Path(cfg.data_dir)
    if not data.is_dir():
        raise ConfigError(f"data directory not found: {data}")
    out = _out(args, cfg, "splits")
    subjects = pipeline.load_subjects(data)
    counts = pipeline.save_splits(pipeline.make_splits(cfg, subjects), out)
    for name, n in counts.items():
        print(f"{name}: {n} slices")
    _emit({"command": "preprocess", "slices": counts, "out": str(out)})
    return EXIT_OK


def _split_dir(args, cfg, name: str) -> Path:
    root = Path(args.data) if args.data else Path(cfg.out_dir) / "splits"
    path = root / name if (root / name).is_dir() else root
    if not (path / "index.json").exists():
        raise ConfigError(f"no preprocessed split at {path}")
    return path


def cmd_pretrain_seg(args) -> int:
    cfg = _config(args)
    slices = load_split(_split_dir(args, cfg, "train_gan"))
    out = _out(args, cfg)
    S, trace = pretrain_segmentor(slices, cfg.train, cfg.seg_arch)
    path = save_network(out / "segmentor.ckpt", S, "segmentor", cfg.seg_arch, {"trace": trace})
    _emit({"command": "pretrain-seg", "ckpt": str(path), "final_dice_loss": trace[-1] if trace else None})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    mode = Mode.parse(cfg.train.mode)
    if not mode.uses_seg and args.ckpt:
        raise ConfigError(f"mode {mode.value} takes no segmentor checkpoint")
    S = None
    if mode.uses_seg:
        if not args.ckpt:
            raise ConfigError(f"mode {mode.value} needs --ckpt pointing at a pre-trained segmentor")
        S, meta = _load(Path(args.ckpt))
        if meta.get("kind") != "segmentor":
            raise ConfigError(f"{args.ckpt} is a {meta.get('kind')} checkpoint, not a segmentor")
    slices = load_split(_split_dir(args, cfg, "train_gan"))
    root = Path(args.data) if args.data else Path(cfg.out_dir) / "splits"
    val = load_split(root / "test") if (root / "test" / "index.json").exists() else None
    out = _out(args, cfg, mode.value)
    G, _ = pipeline.train_generator(cfg, mode, slices, S, val=val, out_dir=out)
    kind = "pix2pix_ensemble" if mode is Mode.PIX2PIX else "generator"
    path = save_network(out / "generator.ckpt", G, kind, cfg.arch, {"mode": mode.value})
    _emit({"command": "train", "mode": mode.value, "ckpt": str(path)})
    return EXIT_OK


def cmd_synthesize(args) -> int:
    if not args.ckpt:
        raise ConfigError("synthesize needs --ckpt")
    G, _ = _load(Path(args.ckpt))
    cfg = _config(args)
    slices = load_split(_split_dir(args, cfg, "test"))
    out = _out(args, cfg, "synth")
    written = []
    for m in Modality:
        p = out / f"synth_{m.label}.npy"
        np.save(p, predict(G, slices.source, int(m)))
        written.append(str(p))
    _emit({"command": "synthesize", "files": written, "n": len(slices)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpts = _named_ckpts(args.ckpt)
    if not ckpts:
        raise ConfigError("evaluate needs at least one --ckpt [NAME=]PATH")
    cfg = _config(args)
    gens = {}
    for name, path in ckpts:
        net, meta = _load(path)
        gens[name or meta.get("extra", {}).get("mode") or path.stem] = net
    slices = load_split(_split_dir(args, cfg, args.split))
    out = _out(args, cfg, "eval")
    pipeline.evaluate_generators(gens, slices, out)
    _emit({"command": "evaluate", "report": str(out / "quality_report.csv"), "methods": sorted(gens)})
    return EXIT_OK


def cmd_boost(args) -> int:
    cfg = _config(args)
    generators = {}
    for name, path in _named_ckpts(args.ckpt):
        net, meta = _load(path)
        if not name:
            mode = meta.get("extra", {}).get("mode")
            if mode is None:
                raise ConfigError(f"{path}: no recorded mode; pass CONDITION=PATH")
            name = pipeline.CONDITION_OF[Mode.parse(mode)].value
        generators[Condition.parse(name).value] = net
    train_boost = load_split(_split_dir(args, cfg, "train_boost"))
    test = load_split(_split_dir(args, cfg, "test"))
    gan_dir = _split_dir(args, cfg, "train_gan")
    gan_ids = load_split(gan_dir).subjects
    out = _out(args, cfg, "boost")
    res = run_boost(train_boost, test, generators, cfg.boost, cfg.seg_arch, out_dir=out,
                    gan_train_ids=gan_ids)
    _emit({"command": "boost", "report": str(out / "dice_report.csv"), "ordering": res["ordering"]})
    return EXIT_OK


COMMANDS = {
    "phantom-gen": (cmd_phantom_gen, "generate a phantom dataset"),
    "preprocess": (cmd_preprocess, "filter, resize, scale and split volumes"),
    "pretrain-seg": (cmd_pretrain_seg, "pre-train the label-conditioned segmentor"),
    "train": (cmd_train, "train a synthesis model"),
    "synthesize": (cmd_synthesize, "synthesize FLAIR/T1/T1ce from T2 slices"),
    "evaluate": (cmd_evaluate, "PSNR/SSIM report for one or more generators"),
    "boost": (cmd_boost, "segmentation-boost experiment"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcmgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config JSON (defaults to the phantom run)")
        p.add_argument("--seed", type=int, default=None, help="root seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--device", choices=["cpu", "accelerator"], default="cpu")
        p.add_argument("--data", help="input data or split directory")
        if name in ("evaluate", "boost"):
            p.add_argument("--ckpt", action="append", help="[NAME=]PATH, repeatable")
        else:
            p.add_argument("--ckpt", help="checkpoint path")
        if name == "train":
            p.add_argument("--mode", choices=list(pipeline.MODE_NAMES), required=True)
        if name == "evaluate":
            p.add_argument("--split", default="test")
    return parser


def _fail(code: int, err: BaseException) -> int:
    print(f"error: {err}", file=sys.stderr)
    print(json.dumps({"error": type(err).__name__, "message": str(err), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return COMMANDS[args.command][0](args)
    except (ConfigError, MissingModality, FileNotFoundError, DataLeakError) as e:
        return _fail(EXIT_CONFIG, e)
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        return _fail(EXIT_RUNTIME, e)


if __name__ == "__main__":
    sys.exit(main())
