# %% [markdown]
# # Architecture walk-through
#
# Build the gaze regressor, trace the shapes through it and count
# parameters for each ablation variant.

# %%
import numpy as np

from eeggaze import model as M

cfg = M.ModelConfig()
net = M.build(cfg, seed=0)
x = np.zeros((2, cfg.channels, cfg.timesteps, 1), np.float32)

# %% the hook sees every stage output
out = net.forward(x, "infer", hook=lambda name, a: print(f"{name:8s} {a.shape}"))
print("output  ", out.shape)

# %% parameter counts; the formula and the built model agree
for variant in M.VARIANTS:
    c = M.ModelConfig.for_variant(variant)
    print(f"{variant:24s} {M.param_count(c):>10,d} {M.build(c).num_parameters():>10,d}")

# %% a 9x1 second convolution adds 8*(32^2 + 64^2) weights
print(M.param_count(M.ModelConfig.for_variant("equal-convs")) - M.param_count(cfg))
