"""Optimal transport with a slack bin: confident pairs match, unmatched rows fall into slack."""
import numpy as np

from mireg.matching import mutual_matches, sinkhorn

rng = np.random.default_rng(2)
scores = rng.normal(scale=0.5, size=(6, 5))
for i in range(4):  # rows 0..3 have a true partner, rows 4 and 5 do not
    scores[i, (i + 1) % 5] += 4.0

P, converged = sinkhorn(scores, iterations=200, slack=True, slack_score=1.0)
np.set_printoptions(precision=2, suppress=True)
print("assignment (last row/column is slack):")
print(P)
print("converged:", converged)
print("mutual matches:")
rows, cols, conf = mutual_matches(P[:-1, :-1])  # slack row and column dropped first
for r, c, s in zip(rows, cols, conf):
    print(f"  row {r} -> col {c}  ({s:.2f})")
