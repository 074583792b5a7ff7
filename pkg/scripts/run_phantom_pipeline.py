"""Run the full phantom experiment through the CLI, one command per stage.

    python3 scripts/run_phantom_pipeline.py --out runs/phantom --seed 0
"""

import argparse
import json
import sys
import time
from pathlib import Path

from tcmgan.cli import main as tcmgan
from tcmgan.pipeline import MODE_NAMES, phantom_run_config


def stage(name, argv):
    t0 = time.perf_counter()
    code = tcmgan(argv)
    print(f"== {name}: exit {code} in {time.perf_counter() - t0:.1f}s", flush=True)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/phantom")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--modes", nargs="+", default=["mgan", "tcmgan"],
                    choices=["pix2pix", "mgan", "tcmgan", "tcmgan-bw"])
    ap.add_argument("--skip-boost", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = phantom_run_config(args.seed)
    cfg.out_dir = str(out)
    cfg.data_dir = str(out / "data")
    config = out / "run_config.json"
    config.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    common = ["--config", str(config), "--seed", str(args.seed)]

    stage("phantom-gen", ["phantom-gen", *common])
    stage("preprocess", ["preprocess", *common])
    stage("pretrain-seg", ["pretrain-seg", *common])
    seg = str(out / "segmentor.ckpt")
    ckpts = []
    for mode in args.modes:
        extra = ["--ckpt", seg] if mode.startswith("tcmgan") else []
        stage(f"train {mode}", ["train", *common, "--mode", mode, *extra])
        ckpts.append(out / MODE_NAMES[mode].value / "generator.ckpt")
    named = [a for p in ckpts for a in ("--ckpt", str(p))]
    stage("evaluate", ["evaluate", *common, *named])
    if not args.skip_boost:
        stage("boost", ["boost", *common, *named])
    print((out / "eval" / "quality_report.csv").read_text())
    if not args.skip_boost:
        print((out / "boost" / "dice_report.csv").read_text())


if __name__ == "__main__":
    main()
