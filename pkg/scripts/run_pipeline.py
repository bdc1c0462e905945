#!/usr/bin/env python3
"""
全流程：gen-data → pretrain-backbones → train-qformer → train-vq → train-lm → eval。
同一配置 + 同一 seed 跑两次，report.json 逐字节相同。

用法: python scripts/run_pipeline.py [--config PATH] [--seed N] [--out RUN_DIR]
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import pipeline  # noqa: E402
from errors import SeedError  # noqa: E402
from eval_harness import format_report  # noqa: E402
from path_config import DEFAULT_CONFIG_PATH  # noqa: E402
from seed_config import load_config  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description="run every stage, then evaluate")
    parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG_PATH)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args()
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed)
        logging.basicConfig(level=cfg.log_level, format="%(asctime)s - %(levelname)s - %(name)s - %(message)s")
        layout = pipeline.RunLayout.for_config(cfg, args.out)
        print(format_report(pipeline.run_all(cfg, layout)))
        print(f"\nreport: {layout.report}")
    except SeedError as e:
        logging.getLogger("seed").error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
