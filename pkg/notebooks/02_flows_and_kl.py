# %% [markdown]
# # Planar flows and the joint KL of multiplicative-noise layers
#
# A quick look at the two pieces of the MNF family that have no closed form:
# the density a planar flow pushes forward, and the sampled KL between two
# layers whose weight means are scaled by a flow variable z.

# %%
import numpy as np
from scipy import integrate

from bayesil.flows import FlowStack, nf_forward
from bayesil.layers import Dense, mnf_kl_draws

rng = np.random.default_rng(0)
flow = FlowStack.init(1, rng, depth=3, std=1.0, scale=0.8)

# %% [markdown]
# Sample z = f(z0) and compare a histogram against the density evaluated by
# inverting the flow.

# %%
z0 = rng.standard_normal((200_000, 1))
z, logdet = nf_forward(flow, z0)
z = z.data[:, 0]
counts, edges = np.histogram(z, bins=40)
mid = 0.5 * (edges[1:] + edges[:-1])
hist = counts / (len(z) * np.diff(edges))
dens = np.exp(flow.log_density_at(mid[:, None]).data)
for m, h, d in zip(mid[::4], hist[::4], dens[::4]):
    print(f"{m:7.3f}  histogram {h:.4f}  density {d:.4f}")

mass = integrate.quad(lambda y: np.exp(flow.log_density_at(np.array([[y]])).data[0]), -30, 30, limit=200)[0]
print("total mass", mass)

# %% [markdown]
# Sampled joint KL between two random MNF dense layers.  Each draw is an
# unbiased estimate; the mean is positive and the spread shows how many draws
# a stable estimate needs.

# %%
def random_layer(rng):
    layer = Dense(4, 3, "mnf", rng=rng)
    for p in layer.named_parameters().values():
        p.data[...] += rng.normal(0, 0.05, p.shape)
    return layer

a, b = random_layer(rng), random_layer(rng)
draws = mnf_kl_draws(a, b.snapshot(), rng.standard_normal((100_000, 4)))
print(f"mean {draws.mean():.4f}  sd {draws.std():.4f}  se {draws.std() / np.sqrt(len(draws)):.4f}")
print("against itself:", np.abs(mnf_kl_draws(a, a.snapshot(), rng.standard_normal((10, 4)))).max())
