# %% [markdown]
# # Training, ensembling and the command line
#
# A small end-to-end run on synthetic phantoms: write a dataset, train one
# fold of a tiny model, ensemble the last snapshots and score the result.
# It takes about a minute on one CPU core.

# %%
import subprocess
import sys
import tempfile
from pathlib import Path

from ichseg.inference import binarize, ensemble_mean, predict_with_checkpoint
from ichseg.metrics import evaluate_case
from ichseg.network import NetworkConfig
from ichseg.preprocessing import CropConfig
from ichseg.training import TrainConfig, cosine_lr, train_fold
from ichseg.volume_io import SyntheticSpec, load_manifest, load_mask, load_volume, make_folds, write_synthetic_dataset

work = Path(tempfile.mkdtemp(prefix="ichseg_demo_"))
manifest_path = write_synthetic_dataset(work / "data", 20, SyntheticSpec(shape=(64, 64, 12)), seed=0)
manifest = load_manifest(manifest_path)
folds = make_folds(list(manifest), 5, seed=0)
print("validation cases:", folds.cases_in(0))

# %% [markdown]
# The learning rate follows a cosine decay to zero at the last epoch.

# %%
print([round(cosine_lr(e, 30, 2e-3), 5) for e in range(0, 31, 5)])

cfg = TrainConfig(lr0=2e-3, epochs=30, batch_size=8, slices_per_case=4, seed=0,
                  crop=CropConfig((64, 64)), net=NetworkConfig(init_filters=8),
                  checkpoint_dir=str(work / "ck"))
result = train_fold(manifest, folds, 0, cfg)
print(f"best validation Dice {result.best_val_dice:.3f} at epoch {result.best_epoch}")

# %% [markdown]
# Average foreground probabilities across the last three improving
# snapshots, then threshold at 0.5.

# %%
snapshots = result.snapshots[-3:]
for cid in folds.cases_in(0):
    volume = load_volume(manifest[cid]["image"], cid)
    gt = load_mask(manifest[cid]["label"], cid)
    members = [predict_with_checkpoint(c, volume) for c in snapshots]
    ens = binarize(ensemble_mean(members))
    scores = [evaluate_case(binarize(m), gt, volume.spacing).dice for m in members]
    print(cid, "members", [round(s, 3) for s in scores], "ensemble", round(evaluate_case(ens, gt, volume.spacing).dice, 3))

# %% [markdown]
# The same pipeline from the shell. Every subcommand writes a
# run_manifest.json next to its outputs.

# %%
def ichseg(*args):
    cmd = [sys.executable, "-m", "ichseg.cli", *map(str, args)]
    print("$ ichseg", " ".join(map(str, args)), flush=True)
    subprocess.run(cmd, check=True)


ichseg("split", "--manifest", manifest_path, "--k", "5", "--out", work / "cli")
val_flags = [flag for cid in folds.cases_in(0) for flag in ("--case", cid)]
ichseg("predict", "--checkpoint", result.checkpoint_path, "--manifest", manifest_path,
       *val_flags, "--out", work / "cli" / "pred")
ichseg("evaluate", "--pred", work / "cli" / "pred" / "masks", "--gt", work / "data" / "labels",
       *val_flags, "--out", work / "cli" / "eval")
ichseg("report", "--metrics", work / "cli" / "eval" / "metrics_report.json", "--out", work / "cli" / "report")
print("outputs under", work)
