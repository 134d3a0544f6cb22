"""Offline training, online errors and a side-by-side comparison for one config.

    python scripts/rom_study.py scripts/configs/desk_neumann.json
    python scripts/rom_study.py scripts/configs/paper_neumann.json --modes 5,25,45
"""

import argparse
import sys

from cutch import harness


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--modes", help="comma separated mode counts")
    p.add_argument("--seed")
    args = p.parse_args(argv)
    extra = []
    if args.modes:
        extra += ["--modes", args.modes]
    if args.seed:
        extra += ["--seed", args.seed]
    for cmd in ("offline", "online", "compare"):
        code = harness.main([cmd, "--config", args.config] + extra)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
