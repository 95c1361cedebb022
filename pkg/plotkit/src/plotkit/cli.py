"""plot: turn harness CSVs into figures.

    plot curves --csv curves.csv --out curves.png [--ood-step 1000]
    plot coordcheck --csv coordcheck.csv --out drift.svg

Output format follows the --out extension (png or svg).
"""

from __future__ import annotations

import argparse
import sys

from .figures import FigureSpec, render_curves, render_coordcheck


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("curves", render_curves), ("coordcheck", render_coordcheck)):
        p = sub.add_parser(name)
        p.add_argument("--csv", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--ood-step", type=int, default=None)
        p.add_argument("--linear-y", action="store_true", help="disable the log-scale y axis")
        p.add_argument("--dpi", type=int, default=110)
        p.set_defaults(render=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = FigureSpec(
        csv_path=args.csv,
        out_path=args.out,
        log_y=not args.linear_y,
        ood_step=args.ood_step,
        dpi=args.dpi,
    )
    path = args.render(spec)
    print(path, file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
