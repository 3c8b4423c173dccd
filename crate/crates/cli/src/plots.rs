//! Standalone plot-script emission: the engine writes CSVs only; rendering
//! happens in a generated python script the user can run or edit.

pub fn solution_plot_script() -> &'static str {
    r##"#!/usr/bin/env python3
"""Render solution.csv: A(t), portfolio weights, and regime bands."""
import csv
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
path = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, "solution.csv")

with open(path, newline="") as fh:
    rows = list(csv.DictReader(fh))
if not rows:
    sys.exit("no rows in " + path)

t = [float(r["t"]) for r in rows]
a_var = [float(r["A"]) for r in rows]
regimes = [r["regime"] for r in rows]
u_cols = sorted((c for c in rows[0] if c.startswith("u_")), key=lambda c: int(c[2:]))

fig, (ax0, ax1) = plt.subplots(2, 1, sharex=True, figsize=(8, 7))
ax0.plot(t, a_var, lw=1.5, color="tab:blue")
ax0.set_ylabel("A(t)")
ax0.set_title("accumulated variance to go")

for col in u_cols:
    ax1.plot(t, [float(r[col]) for r in rows], lw=1.2, label=col)
ax1.set_xlabel("t")
ax1.set_ylabel("weights")
ax1.legend(loc="best", fontsize=8)

palette = {
    "unconstrained": "#d0e7ff",
    "constrained": "#ffd9b3",
    "save": "#d8f0d8",
    "boundary": "#fff3b0",
    "borrow": "#f5c6c6",
}
start = 0
for k in range(1, len(t) + 1):
    if k == len(t) or regimes[k] != regimes[start]:
        for ax in (ax0, ax1):
            ax.axvspan(t[start], t[min(k, len(t) - 1)],
                       color=palette.get(regimes[start], "#eeeeee"), alpha=0.5, lw=0)
        start = k

handles = [plt.Rectangle((0, 0), 1, 1, color=c, alpha=0.5) for c in palette.values()]
fig.legend(handles, list(palette.keys()), loc="lower center", ncol=5, fontsize=8)
fig.tight_layout(rect=(0, 0.05, 1, 1))
out = os.path.splitext(path)[0] + ".png"
fig.savefig(out, dpi=150)
print("wrote", out)
"##
}
