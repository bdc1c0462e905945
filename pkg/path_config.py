"""统一路径：配置、运行目录都以仓库根目录为锚点。运行目录可由 SEED_RUN_DIR 覆盖。"""
from __future__ import annotations

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

REPO_ROOT = Path(__file__).resolve().parent
CONFIGS_DIR = REPO_ROOT / "configs"
DEFAULT_CONFIG_PATH = CONFIGS_DIR / "default_seed_config.json"


def env_run_dir() -> Path | None:
    """SEED_RUN_DIR 环境变量（可选）"""
    v = os.getenv("SEED_RUN_DIR")
    return Path(v) if v else None


def resolve_run_dir(configured: str | Path) -> Path:
    """相对路径按仓库根目录解析"""
    p = env_run_dir() or Path(configured)
    return p if p.is_absolute() else REPO_ROOT / p
