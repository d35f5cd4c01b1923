"""Accuracy test against manufactured closed-form solutions.

Runs the box-constrained optimization on a short mesh sequence with data
manufactured so the whole optimality system (state, adjoint, control) has
known smooth solutions, and prints the errors and experimental orders of
convergence in the weighted broken norms.  The full four-level study of
the accuracy experiment is driven the same way through the command line:

    ddopt convergence --regime flow --levels 4 --out out
"""

import sys

from ddopt import run_convergence_study
from ddopt.cli import write_errors_csv
from ddopt.verification import ERROR_NAMES

levels = [4, 8, 16]
print("running the flow-regime study on n =", levels, "(a minute or so)")
report = run_convergence_study("flow", levels)

print("\n{:8s}".format("n"), " ".join("{:>10d}".format(n)
                                      for n in report.ns))
for name in ERROR_NAMES:
    errs = " ".join("{:10.3e}".format(e) for e in report.errors[name])
    rates = "   rates: " + " ".join("{:.2f}".format(r)
                                    for r in report.rates[name])
    print("{:8s} {}{}".format(name, errs, rates))
print("\nSSN iterations per level:", report.iterations)
print("max cellwise |div u_h| per level:",
      " ".join("{:.1e}".format(d) for d in report.div_max))

write_errors_csv(report, sys.stdout)
