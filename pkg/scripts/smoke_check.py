#!/usr/bin/env python3
"""
冒烟验收：验证模块导入、默认配置可解析，并跑一遍快速性质自检。
"""
from __future__ import annotations

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))


def main() -> int:
    print("=== Smoke Check ===\n")

    print("1. 导入模块...")
    try:
        import causal_qformer  # noqa: F401
        import multimodal_lm  # noqa: F401
        import pipeline  # noqa: F401
        import vq_codebook  # noqa: F401
        from selftest import run_selftest
    except Exception as e:
        print(f"   ✗ {e}")
        return 1
    print("   ✓ 导入成功")

    print("\n2. 模块路径自检:")
    for name in ("tensor_core", "causal_qformer", "vq_codebook", "multimodal_lm"):
        m = sys.modules.get(name)
        p = getattr(m, "__file__", None) or "(unknown)"
        print(f"   {name}: {p} {'✓' if str(ROOT) in p else '⚠'}")

    print()
    return 0 if run_selftest() else 1


if __name__ == "__main__":
    sys.exit(main())
