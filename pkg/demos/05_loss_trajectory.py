"""Pre-trained vs from-scratch fine-tuning, logged in diagnostic mode and
exported as a log-loss trajectory CSV (optionally plotted)."""

import csv
from pathlib import Path

from mp4sr import data as D
from mp4sr import evaluation as E
from mp4sr import training as T
from mp4sr.kernel import make_rng

OUT = Path("trajectory.csv")

ds, store = D.synth_generate(80, 50, 32, 0.9, make_rng(9), feature_noise=1.0)
common = dict(seed=4, batch_size=32, d_a=32, d_0=32, n_experts=2, n_layers=1,
              n_heads=2, diagnostics=True)

pre = T.pretrain(T.TrainConfig(epochs=40, **common), ds, store)
init = {n: t.data.copy() for n, t, _ in pre.model.named_parameters()}
ft_cfg = T.TrainConfig(epochs=15, **common)
with_pre = T.finetune(ft_cfg, ds, store, init=init, early_stop=False, validate=False)
scratch = T.finetune(ft_cfg, ds, store, early_stop=False, validate=False)

n = E.export_loss_trajectory([("pretrained", with_pre.log), ("scratch", scratch.log)], OUT)
print(f"wrote {n} rows to {OUT}")

rows = list(csv.DictReader(OUT.open()))
for run in ("pretrained", "scratch"):
    pts = [r for r in rows if r["run_id"] == run]
    print(f"{run}: log train loss {pts[0]['log_train_loss']} -> {pts[-1]['log_train_loss']}, "
          f"log test loss {pts[0]['log_test_loss']} -> {pts[-1]['log_test_loss']}")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for run, color in (("pretrained", "tab:orange"), ("scratch", "tab:blue")):
        pts = [r for r in rows if r["run_id"] == run]
        ax.plot([float(r["log_train_loss"]) for r in pts],
                [float(r["log_test_loss"]) for r in pts], "o-", label=run, color=color)
    ax.set_xlabel("log train loss")
    ax.set_ylabel("log test loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig("trajectory.png", dpi=120)
    print("wrote trajectory.png")
except ImportError:
    print("matplotlib not installed; skipping the plot")
