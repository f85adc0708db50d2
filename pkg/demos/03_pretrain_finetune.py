"""End-to-end pipeline at desk scale: contrastive pre-training, supervised
fine-tuning with early stopping, and full-ranking evaluation.

Takes around a minute on a laptop.
"""

from mp4sr import data as D
from mp4sr import evaluation as E
from mp4sr import model as M
from mp4sr import training as T
from mp4sr.kernel import make_rng

ds, store = D.synth_generate(100, 40, 16, 0.9, make_rng(1))
common = dict(seed=5, batch_size=64, d_a=32, d_0=32, n_experts=4, n_layers=1, n_heads=2)

print("== pre-training (combined contrastive objective) ==")
pre = T.pretrain(T.TrainConfig(epochs=20, **common), ds, store)
for row in pre.log.rows[::5]:
    print(f"  epoch {row.epoch:3d}  loss {row.train_loss:.4f}")

print("\n== fine-tuning from the pre-trained checkpoint ==")
init = {n: t.data.copy() for n, t, _ in pre.model.named_parameters()}
state = T.finetune(T.TrainConfig(epochs=30, **common), ds, store, init=init)
print(f"  stopped after epoch {state.epoch}; best validation R@20 "
      f"{state.best_val:.4f} at epoch {state.best_epoch}")

print("\n== full-ranking test metrics ==")
split = D.leave_one_out_split(ds)
feats = M.ItemFeatures.from_store(store, ds)
cold, _ = D.cold_item_partition(split)
report = E.evaluate(state.model, feats, split, "test", cold_items=cold)
print(report.format_table())
