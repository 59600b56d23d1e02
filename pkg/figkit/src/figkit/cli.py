"""figkit command line: render metrics CSVs and field payloads.

    figkit loglog --csv PATH --out PATH
    figkit field  --payload PATH --kind heatmap|diagonal --out PATH
"""

from __future__ import annotations

import argparse
import sys

from .payload import CsvError, PayloadError
from .plots import plot_diagonal, plot_errors, plot_heatmap


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="figkit",
                                     description="figures for finite-volume Monte Carlo runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("loglog", help="log-log error panels with the N^(-1/2) guide")
    p.add_argument("--csv", required=True, help="metrics CSV path")
    p.add_argument("--out", required=True, help="output image path")

    p = sub.add_parser("field", help="render one field payload")
    p.add_argument("--payload", required=True, help="FVF1 payload path")
    p.add_argument("--kind", choices=("heatmap", "diagonal"), default="heatmap")
    p.add_argument("--out", required=True, help="output image path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "loglog":
            out = plot_errors(args.csv, args.out)
        else:
            render = plot_heatmap if args.kind == "heatmap" else plot_diagonal
            out = render(args.payload, args.out)
        print(f"wrote {out}")
        return 0
    except (CsvError, PayloadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
