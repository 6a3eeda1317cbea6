# %% [markdown]
# Shared-expert MoE layer
# =======================
# Every token goes through one shared FFN; a router also sends it to its
# top-k routed experts.  Two learned logits (a, b) set how much of each
# path reaches the output:  out = alpha * shared + beta * routed.

# %%
import torch

from abbrmlm.model import MoELayer, build_model, densify_to_moe, desk_config

torch.manual_seed(0)
layer = MoELayer(hidden_dim=8, ffn_dim=16, num_experts=4, top_k=2)
x = torch.randn(5, 8)

with torch.no_grad():
    weights, top_w, top_i = layer.route(x)
    alpha, beta = layer.mixing_weights()
print("router weights (rows sum to 1):\n", weights.numpy().round(3))
print("chosen experts:\n", top_i.numpy())
print(f"alpha {float(alpha):.3f}  beta {float(beta):.3f}")  # both 0.5 at init

# %% [markdown]
# Turning a dense model into an MoE model: the shared expert copies the old
# FFN and the logits start at (0, -10), so beta is about 4.5e-5 and the new
# model reproduces the old one almost exactly.

# %%
dense = build_model(desk_config(100, moe_plan={}), seed=0).eval()
moe = densify_to_moe(dense, {1: (2, 1), 3: (4, 2)}).eval()
ids = torch.randint(31, 100, (2, 12))
with torch.no_grad():
    gap = (dense(ids) - moe(ids)).abs().max()
print("MoE layers:", sorted(moe.moe_layers()))
print(f"parameters {dense.num_parameters():,} -> {moe.num_parameters():,}")
print(f"largest log-prob difference {float(gap):.2e}")
