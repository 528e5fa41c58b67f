# %% [markdown]
# # Incremental learning on Gaussian blobs
#
# Three overlapping 2-D blobs, a 2-32-32-3 MLP, and the training set cut into
# T shards that are seen one after another.  The variational learner carries
# its posterior forward as the next prior; fine-tuning only carries the
# weights.

# %%
from bayesil import build_model, gen_synthetic, incremental_fit, split_shards, train_test_split
from bayesil.experiments import BLOBS_NOISE, blobs_ordering
from bayesil.training import TrainConfig

SEED = 0
train, test = train_test_split(gen_synthetic("blobs", 3000, 3, BLOBS_NOISE, SEED), 0.2, SEED)
print(len(train), "train /", len(test), "test, noise", BLOBS_NOISE)

# %% [markdown]
# Per-stage test accuracy.  Each row is one run, each column one stage.
# Fine-tuning swings with whichever shard it saw last.

# %%
EPOCHS = 50
runs = {}
for family, T in [("ffg", 1), ("ffg", 10), ("ft", 10)]:
    model = build_model("mlp:2-32-32-3", family, SEED)
    _, metrics = incremental_fit(model, split_shards(train, T, SEED), TrainConfig(epochs=EPOCHS, seed=SEED), test)
    runs[f"{family} T={T}"] = [m.test_accuracy for m in metrics]

for label, acc in runs.items():
    print(f"{label:<9}", " ".join(f"{a:.3f}" for a in acc))

# %% [markdown]
# Stage 1 pays a large KL to the N(0, 1) starting prior.  After that each
# shard moves the posterior only a little away from the previous one.

# %%
model = build_model("mlp:2-32-32-3", "ffg", SEED)
_, metrics = incremental_fit(model, split_shards(train, 10, SEED), TrainConfig(epochs=EPOCHS, seed=SEED), test)
for m in metrics:
    print(f"stage {m.stage:>2}  final kl {m.kl_term[-1]:9.3f}  data term {m.data_term[-1]:10.2f}")

# %% [markdown]
# Five seeds, as in the acceptance run.

# %%
comparison = blobs_ordering(seeds=range(5))
print(comparison.summary())
print(f"{comparison.seconds:.0f}s")
