# %% [markdown]
# # View attention and the two encoder variants
#
# The plain encoder feeds multi-head attention straight into the output
# projection; the enhanced one appends the original view embeddings first.

# %%
import numpy as np

from volt.data import build_dataset
from volt.model import ModelConfig, VoltModel

cfg = dict(d=32, heads=4, d_k=8, ffn_hidden=64, enc_layers=3, dec_layers=2, grid=16, token_edge=4)
plain = VoltModel(ModelConfig(**cfg, enhance=False), seed=0)
enhanced = VoltModel(ModelConfig(**cfg, enhance=True), seed=0)

for name, m in (("plain", plain), ("enhanced", enhanced)):
    print(name, "w_view", m.params["enc.0.attn.w_view"].shape, "parameters", m.params.count())

# %% [markdown]
# Views form a set: shuffling them leaves the predicted volume unchanged.

# %%
ds = build_dataset(2, 8, 16, seed=1, d=32)
views = ds.views_array()[0]
perm = np.random.default_rng(0).permutation(len(views))
for name, m in (("plain", plain), ("enhanced", enhanced)):
    a, b = m.predict_volume(views), m.predict_volume(views[perm])
    print(name, "max change under shuffle:", np.abs(a - b).max())

# %% [markdown]
# Per-layer view-view attention (head mean) for one object.

# %%
_, scores = enhanced.encode(views, trace=True)
np.set_printoptions(precision=3, suppress=True)
for layer, s in enumerate(scores):
    print("layer", layer)
    print(s.mean(axis=0))
