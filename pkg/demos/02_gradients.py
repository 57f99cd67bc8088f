# %% [markdown]
# # Checking backward passes
#
# Every layer's analytic gradient is compared to central differences in
# float64. Whole-model checks skip entries whose perturbation crosses a
# ReLU kink, where the finite difference is meaningless.

# %%
import numpy as np

from eeggaze import model as M
from eeggaze import nn
from eeggaze.cli import LAYER_CHECKS, TINY_MODEL
from eeggaze.rng import SplitMix64

for name, make in LAYER_CHECKS.items():
    layer, x = make(SplitMix64(0))
    print(f"{name:10s} {nn.gradcheck(layer, x):.2e}")

# %%
rng = SplitMix64(1)
tiny = M.build(M.ModelConfig(**TINY_MODEL), seed=0, dtype=np.float64)
res = M.gradcheck_model(tiny, rng.normal(3 * 4 * 16).reshape(3, 4, 16, 1), rng.normal(6).reshape(3, 2))
print(f"max error {res.max_error:.2e}, skipped {sum(res.skipped.values())} of {sum(res.checked.values())}")
