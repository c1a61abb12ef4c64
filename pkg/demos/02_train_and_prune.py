# %% [markdown]
# # Train, prune, retrain
#
# One multi-task network serves both appliances. After training, 60% of the
# filters in every conv layer are dropped by L1 norm and the smaller model is
# retrained.

# %%
from nilmfed.compress import compress_pipeline
from nilmfed.data import default_synth_spec, make_windows, synth_household
from nilmfed.metrics import evaluate_model
from nilmfed.model import TrainConfig

spec = default_synth_spec(4000)
house = synth_household(spec, seed=1)
cloud = make_windows(house.mains, house.appliances, 99)
held = synth_household(spec, seed=2)
held = make_windows(held.mains, held.appliances, 99, cloud.normalizer)

# %%
model, report = compress_pipeline(
    cloud.subset(slice(None, None, 4)),
    0.6,
    TrainConfig(epochs=2, learning_rate=5e-4, seed=1),
    train_cfg=TrainConfig(epochs=2, learning_rate=5e-4, seed=0),
    eval_data=held.subset(slice(None, None, 3)),
)

# %% [markdown]
# The report carries exact counts. Conv cost falls roughly with the square of
# the kept fraction: each layer loses output filters, and all but the first
# also lose input channels.

# %%
print("filters", report.filters_before, "->", report.filters_after)
print("params ", report.param_count_before, "->", report.param_count_after)
print("conv ops", report.op_count_before, "->", report.op_count_after)
print("MAE (W) unpruned", [round(v, 1) for v in report.mae_unpruned],
      "pruned", [round(v, 1) for v in report.mae_pruned],
      "retrained", [round(v, 1) for v in report.mae_retrained])

# %%
print(evaluate_model(model, held, house.names).to_table())
