# app.py (repo root) - stable entry, same as `python cli.py`
from __future__ import annotations

from cli import main

if __name__ == "__main__":
    main()
