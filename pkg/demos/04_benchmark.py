# %% [markdown]
# # Inference timing
#
# Batch-1 latency against batched throughput for the full-size model.

# %%
from eeggaze import data as D
from eeggaze import harness as H
from eeggaze import model as M

ds = D.generate_synthetic(1000, 129, 500, seed=5)
net = M.build(M.ModelConfig(), seed=0)

# %%
for mode in ("batch1", "batch64"):
    rep = H.bench(net, ds, mode)
    print(f"{mode:8s} {rep.seconds_per_1000:.3f} s per 1000 samples, {rep.samples_per_second:.0f} samples/s")
