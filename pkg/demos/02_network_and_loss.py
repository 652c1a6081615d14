# %% [markdown]
# # Network and deep-supervised loss
#
# The model is a 2D residual encoder-decoder. Besides the full-resolution
# logits it returns auxiliary logits at 1/2, 1/4 and 1/8 scale, and the loss
# sums a Dice plus cross-entropy term at each scale with halving weights.

# %%
import torch

from ichseg.loss import deep_supervision_loss, deep_supervision_weights, dice_ce_loss
from ichseg.network import NetworkConfig, build_model, encoder_stage_blocks, encoder_stage_filters, forward

cfg = NetworkConfig(in_channels=3)
model = build_model(cfg, seed=0)
print("stage blocks ", encoder_stage_blocks(model))
print("stage filters", encoder_stage_filters(model))
print("parameters   ", sum(p.numel() for p in model.parameters()))

# %%
outs = forward(model, torch.zeros(3, 384, 384))
for o in outs:
    print(tuple(o.shape))

# %% [markdown]
# Inputs must be divisible by 32 because the bottleneck sits five stride-2
# steps below the input.

# %%
try:
    forward(model, torch.zeros(3, 100, 100))
except ValueError as exc:
    print("rejected:", exc)

# %% [markdown]
# Loss weights and a sanity check: a confident correct prediction costs
# almost nothing, a uniform one costs about ln 2 in cross-entropy plus the
# Dice term.

# %%
print("weights", deep_supervision_weights(cfg.ds_levels))
target = torch.zeros(64, 64, dtype=torch.long)
target[20:40, 24:44] = 1
confident = torch.stack([(1 - target) * 10.0, target * 10.0]).float()
print("confident", float(dice_ce_loss(confident, target)))
print("uniform  ", float(dice_ce_loss(torch.zeros(2, 64, 64), target)))

# %% [markdown]
# A few optimizer steps on a tiny model show the total loss going down.

# %%
small = build_model(NetworkConfig(init_filters=4), seed=1)
x = torch.rand(4, 3, 64, 64)
y = (x[:, 0] > 0.7).long()
opt = torch.optim.AdamW(small.parameters(), lr=2e-3, weight_decay=1e-5)
small.train()
for step in range(10):
    opt.zero_grad()
    loss = deep_supervision_loss(small(x), y)
    loss.backward()
    opt.step()
    print(step, round(loss.item(), 4))
