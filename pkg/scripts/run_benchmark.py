"""Train the 3-seed synthetic ensemble and write every benchmark artifact.

    python3 scripts/run_benchmark.py --out runs/benchmark [--jobs 3] [--quick]
"""

import argparse
import json
import logging
import os
from dataclasses import replace

from siamdamage.benchmark import BenchmarkConfig, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--jobs", type=int, default=min(3, os.cpu_count() or 1))
    ap.add_argument("--quick", action="store_true", help="tiny configuration that finishes in seconds")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(relativeCreated)8.0f ms %(name)s: %(message)s")
    cfg = BenchmarkConfig.quick() if args.quick else BenchmarkConfig()
    result = run_benchmark(replace(cfg, jobs=args.jobs), args.out)
    print(json.dumps(result.summary()["ensemble"], indent=2))
    print(f"wall time {result.seconds:.0f} s, artifacts in {args.out}")


if __name__ == "__main__":
    main()
