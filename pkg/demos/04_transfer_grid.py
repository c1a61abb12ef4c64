# %% [markdown]
# # Which layers transfer?
#
# Copy the first n layers of a trained model, re-initialize the rest and
# retrain on the target household, either with the copied layers frozen
# ("fixed") or free ("fine-tuned"). Seven depths times two modes give 14 rows.

# %%
from nilmfed.adapt import transfer_grid
from nilmfed.data import default_synth_spec, make_windows, synth_household
from nilmfed.model import TrainConfig, build_seq2point, train

spec = default_synth_spec(3000)
house = synth_household(spec, seed=1)
cloud = make_windows(house.mains, house.appliances, 99)
source, _ = train(build_seq2point(99, 2, seed=0), cloud.subset(slice(None, None, 4)),
                  TrainConfig(epochs=2, learning_rate=5e-4))

home = synth_household(spec.shifted(1.5, 1.3), seed=21)
target = make_windows(home.mains, home.appliances, 99, cloud.normalizer.for_mains(home.mains))

# %%
result = transfer_grid(source, target.subset(slice(0, 2000, 8)), target.subset(slice(2000, None, 2)),
                       TrainConfig(epochs=1, learning_rate=5e-4), seed=0)
print(result.to_csv())

# %% [markdown]
# With all seven layers copied and frozen nothing is trained, so that row is
# the source model scored as-is.
