"""
Rater panels
============

Consensus, kappa statistics and the derived T and LO scores on a simulated
five-rater panel.  Raters see the true grid with independent +-1 noise.
"""
import numpy as np

from bsnet import scoring
from bsnet.scoring import Rating

rng = np.random.default_rng(0)
truth = {f"img{i:03d}": rng.integers(0, 4, (3, 2)) for i in range(60)}
noise = [0.1, 0.2, 0.25, 0.3, 0.4]  # most senior rater is the most reliable


def noisy(s, p):
    step = rng.choice([-1, 1], size=s.shape) * (rng.uniform(size=s.shape) < p)
    return np.clip(s + step, 0, 3)


panels = {k: [Rating(f"R{j}", j + 1, noisy(s, p)) for j, p in enumerate(noise)] for k, s in truth.items()}
cons = {k: scoring.consensus(v) for k, v in panels.items()}
hits = np.mean([np.array_equal(cons[k], truth[k]) for k in truth])
print(f"consensus reproduces the full grid on {hits:.0%} of images")

# pairwise Cohen kappa over all region cells, and one Fleiss kappa for the panel
cells = np.stack([np.concatenate([r.score.ravel() for r in (panels[k][j] for k in truth)]) for j in range(5)], axis=1)
print("cohen R0-R4:", round(scoring.cohen_kappa(cells[:, 0], cells[:, 4]), 3))
print("fleiss, five raters:", round(scoring.fleiss_kappa(cells), 3))

k = next(iter(truth))
t, g = scoring.to_t_score(truth[k])
print("grid\n", truth[k], "\nglobal", scoring.global_score(truth[k]), "T", g, "LO", round(scoring.apply_lo(scoring.global_score(truth[k])), 2))
