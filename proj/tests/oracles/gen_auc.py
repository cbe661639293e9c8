#!/usr/bin/env python3
"""Numerical-integration oracle for the pose AUC.

AUC at threshold tau = 100/tau * integral_0^tau recall(t) dt, where
recall(t) is the fraction of errors <= t. Midpoint rule with 10^5 samples;
the closed form in geometry.cpp must agree within 0.01 (criterion tolerance)
and does so to ~1e-3 here.
"""


def auc_numeric(errors, tau, steps=100000):
    n = len(errors)
    total = 0.0
    for k in range(steps):
        t = (k + 0.5) * tau / steps
        total += sum(1 for e in errors if e <= t) / n
    return 100.0 * total / steps


def main():
    fixed = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
    for tau in (5.0, 10.0, 20.0):
        print(f"errors {fixed} tau {tau}: {auc_numeric(fixed, tau):.6f}")

    # seeded pseudo-random list (LCG so the script has no dependencies)
    state = 123456789
    errs = []
    for _ in range(40):
        state = (1103515245 * state + 12345) % (1 << 31)
        errs.append(25.0 * state / float(1 << 31))
    print("lcg(123456789) first 5:", [round(e, 6) for e in errs[:5]])
    for tau in (5.0, 10.0, 20.0):
        print(f"lcg list tau {tau}: {auc_numeric(errs, tau):.6f}")


if __name__ == "__main__":
    main()
