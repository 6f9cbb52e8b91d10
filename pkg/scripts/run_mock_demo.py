#!/usr/bin/env python3
"""End-to-end offline demo: synthesize a fixture split, run the two-stage
pipeline against the corrupt mock (every payload wrapped in junk the repair
pass must strip), then score the predictions.

Usage:
    python3 scripts/run_mock_demo.py --workdir /tmp/wardround-demo
"""

import argparse
import sys
from pathlib import Path

from wardround.cli import main as cli


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default="demo-out",
                        help="directory for fixtures, run artifacts, and the report")
    parser.add_argument("--records", type=int, default=10,
                        help="fixture split size (default 10)")
    parser.add_argument("--seed", type=int, default=42,
                        help="fixture generator seed (default 42)")
    parser.add_argument("--mock-mode", default="corrupt",
                        choices=("echo_gold", "corrupt"),
                        help="mock behavior for the run (default corrupt)")
    args = parser.parse_args(argv)

    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    dataset = workdir / "fixture.jsonl"
    run_dir = workdir / "run"
    report = workdir / "report.json"

    steps = [
        ["fixtures", "--out", str(dataset),
         "--seed", str(args.seed), "--count", str(args.records)],
        ["validate", "--dataset", str(dataset)],
        ["run", "--dataset", str(dataset), "--out", str(run_dir),
         "--set", f"mock.mode={args.mock_mode}"],
        ["eval", "--dataset", str(dataset),
         "--predictions", str(run_dir / "predictions.jsonl"),
         "--out", str(report)],
    ]
    for step in steps:
        print(f"$ wardround {' '.join(step)}")
        code = cli(step)
        if code != 0:
            print(f"step failed with exit code {code}", file=sys.stderr)
            return code
        print()
    print(f"demo artifacts under {workdir}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
