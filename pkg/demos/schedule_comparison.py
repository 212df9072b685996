"""How many inner steps per outer iteration does the assembly game need?

Runs the distributed method three times on the same assembly instance,
changing only the number of stochastic subgradient steps per outer
iteration, and plots the distance to the centralised equilibrium.  A fixed
step count stalls at a noise floor; growing counts keep improving.

    python demos/schedule_comparison.py [K]
"""

import sys
from pathlib import Path

from sgnep.experiment import compare_schedules, load_config

K = int(sys.argv[1]) if len(sys.argv) > 1 else 600
cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "assembly.toml")
cfg.run["K"] = K
out, curves = compare_schedules(cfg, ["power:1e-4:2.1:20", "power:0.1:1:20", "const:20"])
for label, c in curves.items():
    print(f"{label:>20s}: distance after {K} iterations {c[-20:].mean():.3e}")
print(f"overlay plot: {out / 'compare.png'}")
