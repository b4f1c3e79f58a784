"""Run the finite-difference gradient suite and print the per-component table."""

import argparse
import sys

from cocobert.gradsuite import format_reports, main_suite

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    reports, secs = main_suite(ap.parse_args().seeds)
    print(format_reports(reports, secs))
    sys.exit(0 if all(r.passed for r in reports) else 1)
