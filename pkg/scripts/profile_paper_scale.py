#!/usr/bin/env python3
"""Print the cost report of the frozen published-scale configuration.

The reference point is a 103-band scene with 9 classes at a 13x13 input
(the usual per-sample cost benchmark for that dataset family).
"""

from mambamoe.profiler import PAPER_SCALE, make_report, report_csv, report_table

if __name__ == "__main__":
    report = make_report(PAPER_SCALE, (103, 13, 13))
    print(report_table(report), end="")
    print()
    print(report_csv(report), end="")
