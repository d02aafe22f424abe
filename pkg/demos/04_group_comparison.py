"""Who loads on each component, and do their traits differ?"""

# %%
import numpy as np

from behavtensor import FitConfig, fit_restarts
from behavtensor.analysis import MetadataTable, compare_groups, temporal_profile, top_individuals
from behavtensor.cp import CPModel
from behavtensor.tensor import reconstruct

rng = np.random.default_rng(4)
U = 0.05 * rng.random((48, 3))
for r in range(3):
    U[16 * r:16 * (r + 1), r] += 1.0
T = rng.random((30, 3))
T[:, 0] = np.linspace(0.1, 1.0, 30)  # one pattern that builds over the term
truth = CPModel([6.0, 5.0, 4.0], [U, rng.random((20, 3)), T])
model, _ = fit_restarts(reconstruct(truth), FitConfig(rank=3, seed=0, n_restarts=3))

# %% Top quarter of individuals per component
users = [f"s{i:02d}" for i in range(48)]
groups = [top_individuals(model, r, 0.25, users) for r in (1, 2, 3)]
for g in groups:
    print(f"component {g.component}:", " ".join(g.labels[:6]), "...")

# %% A trait that is higher for one block of people
meta = MetadataTable()
for i, u in enumerate(users):
    meta.set(u, "extraversion", rng.normal(3.0 if 16 <= i < 32 else 0.0, 1.0))
res = compare_groups(groups, meta, "extraversion", "anova")
print(f"ANOVA F={res.omnibus.statistic:.2f} p={res.omnibus.p_value:.2e}")
for t in res.pairwise:
    print(" vs ".join(t.group_labels), f"p={t.p_value:.2e}")

# %% Temporal profile of each component, first and last week
for r in (1, 2, 3):
    prof = [v for _, v in temporal_profile(model, r)]
    print(r, np.round(prof[:3], 3), "...", np.round(prof[-3:], 3))
