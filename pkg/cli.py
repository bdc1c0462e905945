"""
命令行入口：python cli.py <subcommand> [--config PATH] [--seed N] [--out PATH]

退出码：0 成功；1 运行错误（SeedError，已记录日志）；2 用法错误。
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

import pipeline
from errors import ImageFormatError, SeedError
from eval_harness import format_report
from multimodal_lm import generate_caption, generate_image
from path_config import DEFAULT_CONFIG_PATH
from reverse_qformer import read_ppm, write_ppm
from seed_config import SeedConfig, load_config
from synth_data import IMAGE_SIZE

logger = logging.getLogger("seed")

TRAIN_COMMANDS = ("gen-data", *pipeline.STAGES)


def _seed(value: str) -> int:
    v = int(value)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seed",
        description="Desk-scale discrete visual tokenizer + multimodal LM on a synthetic shapes corpus.",
    )
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    def add(name: str, help_text: str, *, config_required: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, required=config_required, default=None if config_required else DEFAULT_CONFIG_PATH)
        p.add_argument("--seed", type=_seed, default=None, help="覆盖配置中的 seed")
        p.add_argument("--out", type=Path, default=None)
        return p

    add("gen-data", "generate the train / held-out SEEDDATA files", config_required=True)
    add("pretrain-backbones", "pretrain and freeze the ViT / text / generation surrogates", config_required=True)
    add("train-qformer", "stage I: causal Q-Former contrastive training", config_required=True)
    add("train-vq", "stage II: codebook + code decoder + reverse Q-Former", config_required=True)
    add("train-lm", "pretrain the toy LM, then LoRA multimodal training", config_required=True)

    p = add("tokenize", "image → visual code ids")
    _image_source(p)
    p = add("detokenize", "visual code ids → image (PPM)")
    p.add_argument("--codes", required=True, help="以空格分隔的码序列")
    p = add("caption", "image → caption")
    _image_source(p)
    p = add("imagine", "caption → visual code ids → image (PPM)")
    p.add_argument("--text", required=True, help="标题文本")
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temp", type=float, default=1.0, help="采样温度（mode=sample 时生效）")

    p = add("eval", "held-out evaluation, merged into report.json", config_required=True)
    p.add_argument("kind", nargs="?", choices=(*pipeline.EVAL_KINDS, "all"), default="all")
    p.add_argument("--split", choices=("heldout",), default="heldout", help="只评测留出集")
    p.add_argument("--run-dir", type=Path, default=None, help="运行目录（默认取配置）；--out 指定报告文件")

    sub.add_parser("selftest", help="fast property suite (causality, gradients, oracles)")
    return parser


def _image_source(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--image", type=Path, help="P6 PPM 图像")
    g.add_argument("--image-idx", type=int, default=0, help="留出集样本下标（默认 0）")


def _load_image(args, layout: pipeline.RunLayout) -> np.ndarray:
    if args.image is not None:
        image = read_ppm(args.image)
        if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ImageFormatError(args.image, f"expected a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {image.shape[2]}x{image.shape[1]}")
        return image
    _, heldout = pipeline.load_data(layout)
    if not 0 <= args.image_idx < len(heldout):
        raise SeedError(f"image index {args.image_idx} outside [0, {len(heldout)})")
    return heldout.images[args.image_idx]


def _run(args, cfg: SeedConfig) -> int:
    cmd = args.command
    if cmd in TRAIN_COMMANDS:
        layout = pipeline.RunLayout.for_config(cfg, args.out)
        if cmd == "gen-data":
            pipeline.gen_data(cfg, layout)
        else:
            pipeline.STAGES[cmd](cfg, layout)
        print(layout.root)
        return 0

    if cmd == "eval":
        layout = pipeline.RunLayout.for_config(cfg, args.run_dir)
        kinds = pipeline.EVAL_KINDS if args.kind == "all" else (args.kind,)
        metrics = pipeline.run_eval(cfg, layout, kinds, report_path=args.out)
        print(format_report(metrics))
        return 0

    layout = pipeline.RunLayout.for_config(cfg)
    if cmd == "tokenize":
        tokenizer = pipeline.load_tokenizer(cfg, layout)
        print(" ".join(str(int(c)) for c in tokenizer.tokenize(_load_image(args, layout))))
    elif cmd == "detokenize":
        tokenizer = pipeline.load_tokenizer(cfg, layout)
        try:
            codes = np.asarray([int(c) for c in args.codes.split()], dtype=np.int64)
        except ValueError:
            raise SeedError(f"codes must be integers: {args.codes!r}") from None
        print(write_ppm(args.out or layout.root / "detokenized.ppm", tokenizer.detokenize(codes)))
    elif cmd == "caption":
        model = pipeline.load_lm(cfg, layout)
        print(generate_caption(_load_image(args, layout), model))
    elif cmd == "imagine":
        model = pipeline.load_lm(cfg, layout)
        rng = pipeline.stage_rng(cfg, "imagine")
        result = generate_image(args.text, model, rng, args.mode, args.temp)
        print(" ".join(str(int(c)) for c in result.codes))
        print(write_ppm(args.out or layout.root / "imagined.ppm", result.image))
    return 0


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.command == "selftest":
        _setup_logging("WARNING")
        from selftest import run_selftest

        return 0 if run_selftest() else 1

    _setup_logging("INFO")
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed)
        _setup_logging(cfg.log_level)
        return _run(args, cfg)
    except SeedError as e:
        logger.error("%s", e)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
