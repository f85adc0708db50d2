"""Run every in-scope model variant on one small dataset and compare.

Mirrors the published ablation table's structure: the full model plus
seven variants that each remove or rewire one component. A few minutes.
"""

from mp4sr import data as D
from mp4sr import training as T
from mp4sr.kernel import make_rng

ds, store = D.synth_generate(80, 30, 16, 0.9, make_rng(3))
cfg = T.TrainConfig(seed=2, batch_size=64, epochs=10, d_a=32, d_0=32,
                    n_experts=2, n_layers=1, n_heads=2)

rows = T.ablation_table(cfg, ds, store, pretrain_epochs=15)
metrics = [k for k in rows[0] if k != "variant"]
width = max(len(r["variant"]) for r in rows) + 2
print("variant".ljust(width) + " ".join(f"{m:>8}" for m in metrics))
for r in rows:
    print(r["variant"].ljust(width) + " ".join(f"{r[m]:8.4f}" for m in metrics))
