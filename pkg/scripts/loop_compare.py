"""Drag a yarn loop against its standing part under all three contact modes.

Filtered contact should keep the length close to rest; the plain barrier inflates it
and culling with the default radius lets the turn slip through.

    python scripts/loop_compare.py --out results/loop
"""
import argparse
from pathlib import Path

from codimsim.cli import run_config
from codimsim.scenario import load_config

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "loop.json"))
    ap.add_argument("--cull-radius", type=int, default=11)
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    base = load_config(args.scenario)
    print(f"{'mode':>10} {'ratio':>9} {'max x':>6} {'iters':>6}")
    for mode in ("filtered", "barrier", "culled"):
        cfg = base.with_mode(mode, args.cull_radius)
        out = Path(args.out) / mode if args.out else None
        _, rows = run_config(cfg, out, out / "metrics.csv" if out else None, timing=False)
        print("%10s %9.5f %6d %6d" % (mode, rows[-1].expansion_ratio,
                                      max(r.intersection_count for r in rows),
                                      sum(r.newton_iters for r in rows)))


if __name__ == "__main__":
    main()
