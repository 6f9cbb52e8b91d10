#!/usr/bin/env python3
"""Run the full ablation sweep offline: the framework variants
(w/o backward inference, w/o reflection, w/o refinement) and, optionally, the
protocol variants (w/o round 1, w/o round 2), each scored and compared.

Usage:
    python3 scripts/ablation_sweep.py --workdir /tmp/wardround-ablation --protocol
"""

import argparse
import sys
from pathlib import Path

from wardround.cli import main as cli


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default="ablation-out",
                        help="directory for fixtures and per-variant artifacts")
    parser.add_argument("--records", type=int, default=10,
                        help="fixture split size (default 10)")
    parser.add_argument("--seed", type=int, default=42,
                        help="fixture generator seed (default 42)")
    parser.add_argument("--protocol", action="store_true",
                        help="also sweep the protocol variants (skip round 1 / round 2)")
    args = parser.parse_args(argv)

    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    dataset = workdir / "fixture.jsonl"

    code = cli(["fixtures", "--out", str(dataset),
                "--seed", str(args.seed), "--count", str(args.records)])
    if code != 0:
        return code

    ablate = ["ablate", "--dataset", str(dataset), "--out", str(workdir / "variants")]
    if args.protocol:
        ablate.append("--protocol")
    print(f"$ wardround {' '.join(ablate)}")
    code = cli(ablate)
    if code != 0:
        print(f"ablation failed with exit code {code}", file=sys.stderr)
        return code
    print(f"\nper-variant reports under {workdir}/variants/<variant>/report.json")
    print(f"comparison table at {workdir}/variants/comparison.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
