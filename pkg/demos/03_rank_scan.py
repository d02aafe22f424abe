"""Choosing the number of components from core consistency."""

# %%
from behavtensor.diagnostics import SynthSpec, gen_synthetic, rank_scan, select_rank

ds, _ = gen_synthetic(SynthSpec((20, 25, 15), rank=3, noise_snr_db=25, seed=2))

# %% Five fits per rank; negative consistencies count as zero
scan = rank_scan(ds.tensor, range(1, 7), n_init=5, seed=0)
for r, mean, std, n in scan.rows():
    bar = "#" * int(mean / 5)
    print(f"R={r}  {mean:6.2f}  {'' if std is None else f'+/- {std:.2f}':>10}  {bar}")

# %% The elbow: where the curve bends down hardest
print("selected rank", select_rank(scan))
