# %% [markdown]
# # Training on synthetic EEG
#
# The generator mixes the gaze position into the channels through a fixed
# random map, so a decoder exists. A reduced-width model trained with the
# default Adam recipe gets well under the chance baseline.

# %%
from eeggaze import data as D
from eeggaze import harness as H
from eeggaze import model as M

ds = D.generate_synthetic(1024, channels=16, timesteps=64, seed=3, noise_sigma=1.0)
arch = M.ModelConfig(channels=16, timesteps=64, spatial_filters=8, block_widths=(8, 16), fc_width=32)
cfg = H.TrainConfig(epochs=10, variant=arch, split=D.SplitSpec("per-epoch"))

# %%
net, report = H.train(ds, cfg)
for rec in report.epochs:
    print(f"epoch {rec.epoch:2d}  train {rec.train_loss:.4f}  val MAE {rec.val_mae:7.2f}")

# %%
chance = H.centroid_distance(*D.SCREEN)
print(f"test MAE {report.test_mae:.1f} px, chance {chance:.1f} px")
