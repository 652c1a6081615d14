# %% [markdown]
# # Windowing and slice inputs
#
# A CT volume stores Hounsfield units. The network sees a few 2D channels built
# from one axial slice. Here we build a synthetic phantom, map HU to [0, 1]
# through display windows and assemble the three input strategies.

# %%
import numpy as np

from ichseg import preprocessing as pp
from ichseg.volume_io import SyntheticSpec, generate_synthetic_case

volume, label = generate_synthetic_case(SyntheticSpec(shape=(96, 96, 10), n_lesions=3), seed=3)
print("volume", volume.shape, "spacing", volume.spacing)
print("HU range %.1f .. %.1f" % (volume.data.min(), volume.data.max()))
print("lesion voxels", int(label.data.sum()))

# %% [markdown]
# Each window is a (center, width) pair. Values below the window become 0,
# values above become 1, and the inside maps linearly.

# %%
hu = np.array([-1000, 0, 40, 80, 180, 2000])
for name, w in pp.WINDOWS.items():
    print(f"{name:9s}", np.round(pp.apply_window(hu, w), 3))

# %% [markdown]
# Lesions are hyperdense, so under the brain window they sit near the top of
# the range while the background stays in the middle.

# %%
z = int(np.argmax(label.data.sum(axis=(0, 1))))
brain = pp.apply_window(volume.data[:, :, z], pp.BRAIN)
inside = label.data[:, :, z].astype(bool)
print(f"slice {z}: mean lesion {brain[inside].mean():.2f}, mean background {brain[~inside].mean():.2f}")

# %% [markdown]
# The three strategies differ only in how channels are stacked: three
# neighbouring slices under one window, three windows on one slice, or three
# windows times three slices (window-major order).

# %%
for strategy in (pp.InputStrategy.adjacent_slices(), pp.InputStrategy.multi_window(), pp.InputStrategy.combined()):
    x = pp.build_input(volume, z, strategy)
    print(f"{strategy.kind.value:16s} channels={strategy.n_channels} array={x.shape} {x.dtype}")

# %% [markdown]
# Training samples are cropped with a bias toward lesion pixels and then
# augmented. The crop keeps image and label aligned.

# %%
rng = np.random.default_rng(0)
samples = pp.sample_slices(volume, label, 6, pp.InputStrategy.combined(),
                           pp.CropConfig((64, 64)), pp.AugmentConfig(), rng)
for s in samples:
    print(s.case_id, s.slice_index, s.image.shape, "foreground px:", int(s.label.sum()))
