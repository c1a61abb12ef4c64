# %% [markdown]
# # A few rounds of federation
#
# The server trains and compresses a cloud model, then each round every client
# personalizes a copy on its own unlabeled data and the server averages the
# results. A held-out labeled tail from each client tracks progress.

# %%
from nilmfed.adapt import CoralConfig
from nilmfed.data import default_synth_spec, make_windows, synth_household
from nilmfed.fed import FedConfig, bootstrap, probe_batch, probe_metrics, run_round, synthetic_clients
from nilmfed.model import TrainConfig

spec = default_synth_spec(4000)
house = synth_household(spec, seed=1)
cloud = make_windows(house.mains, house.appliances, 99)
cfg = TrainConfig(epochs=2, learning_rate=5e-4)
server = bootstrap(cloud.subset(slice(None, None, 4)), 0.6, cfg, cfg, source_cache_size=256)
print("global model filters:", server.global_params.arch.filters)

# %%
clients = synthetic_clients(default_synth_spec(2000), 3, seed=5)
probe = probe_batch(clients, 99, server.normalizer)
fed = FedConfig(local=TrainConfig(epochs=2, learning_rate=1e-4), coral=CoralConfig(lam=3000.0))
print("round 0 probe MAE", round(probe_metrics(server.global_params, probe)["mean_mae"], 2))

for _ in range(2):
    server, report = run_round(server, [c.state for c in clients], fed, probe)
    print(f"round {report.round} probe MAE {report.probe['mean_mae']:.2f}, digest {report.param_digest[:12]}")
