# %% [markdown]
# # Priors from a pretrained network
#
# Split MNIST into two groups of five digits.  A point-estimate MLP learns
# group A; its hidden layer then becomes the prior mean for a variational
# network learning group B in five shards.  The per-weight prior width comes
# from a diagonal Laplace fit.

# %%
import numpy as np

from bayesil import LaplaceConfig, build_model, label_split, laplace_fit_sigma, mnist_subset, train_map, train_test_split
from bayesil.experiments import pretraining_protocol
from bayesil.training import evaluate

SEED = 0
halves = label_split(mnist_subset(), SEED)
print("group A digits", halves.classes_a, " group B digits", halves.classes_b)
a_train, a_test = train_test_split(halves.part_a, 0.2, SEED)

# %%
ft = build_model("mlp:784-100-5", "ft", SEED)
w_star = train_map(ft, a_train, epochs=10, weight_decay=1e-4, seed=SEED)
print("group A test accuracy", evaluate(ft, a_test, 1, None)[0])

# %% [markdown]
# Laplace widths per layer.  At a point that fits its 2000 training images
# almost perfectly the per-example gradients are tiny, so the hidden weights
# get N*F well below 1 and land on the sigma ceiling.  Only the output layer,
# which is not transferred, is pinned down by the data.

# %%
var = laplace_fit_sigma(ft, a_train, LaplaceConfig(len(a_train)))
for name, v in var.items():
    sigma = np.sqrt(v).ravel()
    quantiles = np.round(np.quantile(sigma, [0.01, 0.5, 0.99]), 4)
    print(f"{name:<9} sigma quantiles {quantiles}  at ceiling {np.mean(sigma == 1.0):.2f}")

# %% [markdown]
# The comparison on group B (this takes a few minutes per seed).

# %%
runs = pretraining_protocol(seeds=[SEED])
print(runs.summary())
