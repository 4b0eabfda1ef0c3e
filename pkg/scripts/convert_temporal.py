#!/usr/bin/env python3
"""One-shot converter: temporal-forecasting JSON -> dataset container.

Accepts the upstream epidemic/delivery JSON shape
{"edges": [[i, j], ...], "FX": [[...per-node values...], ...]} (the
feature matrix key may also be "X"). Rows of the feature matrix are time
steps; values may be per-node scalars or per-node vectors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from adrgnn.data import from_temporal_json, save_temporal


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--json", type=Path, required=True)
    parser.add_argument("--name", required=True)
    parser.add_argument("--tau-in", type=int, default=4)
    parser.add_argument("--tau-out", type=int, default=1)
    parser.add_argument("--out", type=Path, required=True)
    args = parser.parse_args()

    payload = json.loads(args.json.read_text())
    if "FX" not in payload and "X" in payload:
        payload = {**payload, "FX": payload["X"]}
    dataset = from_temporal_json(payload, name=args.name, tau_in=args.tau_in,
                                 tau_out=args.tau_out)
    out = save_temporal(dataset, args.out)
    t, n, c = dataset.series.shape
    print(f"wrote {args.name}: T={t}, n={n}, channels={c} -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
