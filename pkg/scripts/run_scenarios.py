"""Run every shipped scenario and print one summary line each.

    python3 scripts/run_scenarios.py [--verbose]
"""

import argparse
import sys
from pathlib import Path

from anis.scenario import run_scenario

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--verbose", action="store_true", help="print full transcripts")
    args = ap.parse_args()
    worst = 0
    for path in sorted(SCENARIOS.glob("*.scenario")):
        code, transcript = run_scenario(path)
        worst = max(worst, code)
        print(f"{'ok ' if code == 0 else 'BAD'} {path.name}: {len(transcript)} steps, exit {code}")
        if args.verbose:
            for line in transcript:
                print("   ", line)
    return worst


if __name__ == "__main__":
    sys.exit(main())
