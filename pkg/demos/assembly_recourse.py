"""Look inside the second stage of the assembly game.

After demand is revealed, a player turns pre-ordered parts into products and
salvages the leftovers.  That plan is a small LP whose dual vertex gives a
subgradient of the recourse value, and the first-stage solver feeds on those
subgradients.  This script evaluates the recourse on a line through order
space and checks convexity and the subgradient inequality along the way.

    python demos/assembly_recourse.py
"""

import numpy as np

from sgnep.games.assembly import build_paper_assembly

game = build_paper_assembly(seed=0)
i = 0
H = game.H[i]
print(f"player {i}: {H.shape[1]} part types, {H.shape[0]} products, {game.L[i]} demand scenarios")
print("parts per product:\n", H.astype(int))

d = game.demands[i][0]
lo, hi = game.players[i].local_set.lo, game.players[i].local_set.hi
rng = np.random.default_rng(1)
a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)

print("\n   t    Q(x(t))    slope along the line")
ts = np.linspace(0, 1, 11)
vals = []
for t in ts:
    x = (1 - t) * a + t * b
    q, g = game.recourse(i, x, d)
    vals.append(q)
    print(f"{t:4.1f}   {q:9.3f}   {g @ (b - a):9.3f}")

second_diff = np.diff(vals, 2)
print(f"\nsmallest second difference {second_diff.min():.2e} (nonnegative: the recourse is convex)")

worst = 0.0
for _ in range(2000):
    x, z = rng.uniform(lo, hi), rng.uniform(lo, hi)
    qx, gx = game.recourse(i, x, d)
    worst = max(worst, qx + gx @ (z - x) - game.recourse(i, z, d)[0])
print(f"largest subgradient-inequality violation over 2000 pairs: {worst:.1e}")
