"""Full-ranking leave-one-out evaluation.

Every catalog item is a candidate for every user (no negative sampling, no
seen-item filtering). Rankings order by descending fine-tune logit with
deterministic ties broken by ascending item index.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernel as K
from . import losses as L
from . import model as M
from .data import PAD, SplitBundle, eval_instances, frame_prefixes
from .errors import ConfigError, ContractError

DEFAULT_KS = (5, 10, 20)


def rank_items(logit_row: np.ndarray) -> np.ndarray:
    """All real item indices ordered by descending score; equal scores rank
    by ascending item index (stable sort guarantees it)."""
    order = np.argsort(-logit_row[1:], kind="stable")
    return order.astype(np.int64) + 1


def _target_rank(ranked: np.ndarray, target: int) -> int:
    pos = np.flatnonzero(ranked == target)
    if pos.size == 0:
        raise ContractError(f"target {target} is not in the ranked catalog")
    return int(pos[0]) + 1


def recall_at_k(ranked: np.ndarray, target: int, k: int) -> float:
    if k < 1:
        raise ConfigError("K must be >= 1")
    return 1.0 if _target_rank(ranked, target) <= k else 0.0


def ndcg_at_k(ranked: np.ndarray, target: int, k: int) -> float:
    """Single relevant item: 1/log2(rank+1) inside the cut, else 0; IDCG=1."""
    if k < 1:
        raise ConfigError("K must be >= 1")
    rank = _target_rank(ranked, target)
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class MetricsReport:
    mode: str
    ks: tuple[int, ...]
    n_users: int
    overall: dict[str, float]
    groups: list[dict] = field(default_factory=list)      # user buckets by train length
    cold: dict | None = None
    warm: dict | None = None
    empty: bool = False

    def metric_names(self):
        return [f"R@{k}" for k in self.ks] + [f"N@{k}" for k in self.ks]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scope", "n_users"] + self.metric_names())
            if self.empty:
                w.writerow(["empty", 0] + [""] * len(self.metric_names()))
                return
            w.writerow(["overall", self.n_users] + [f"{self.overall[m]:.6f}" for m in self.metric_names()])
            for g in self.groups:
                w.writerow([g["scope"], g["n_users"]] + [f"{g['metrics'][m]:.6f}" for m in self.metric_names()])
            for name, part in (("cold", self.cold), ("warm", self.warm)):
                if part is not None:
                    w.writerow([name, part["n_users"]]
                               + [f"{part['metrics'][m]:.6f}" for m in self.metric_names()])

    def format_table(self) -> str:
        if self.empty:
            return f"[{self.mode}] empty evaluation set\n"
        names = self.metric_names()
        rows = [("overall", self.n_users, self.overall)]
        rows += [(g["scope"], g["n_users"], g["metrics"]) for g in self.groups]
        for name, part in (("cold", self.cold), ("warm", self.warm)):
            if part is not None:
                rows.append((name, part["n_users"], part["metrics"]))
        width = max(len(scope) for scope, _, _ in rows + [("scope", 0, {})]) + 2
        pad = " " * (len(self.mode) + 3)
        lines = [f"[{self.mode}] " + "scope".ljust(width) + f"{'users':>7} "
                 + " ".join(f"{n:>8}" for n in names)]
        for scope, n, metrics in rows:
            lines.append(pad + scope.ljust(width) + f"{n:>7} "
                         + " ".join(f"{metrics[m]:>8.4f}" for m in names))
        return "\n".join(lines) + "\n"


def _metrics_for(ranks: np.ndarray, ks) -> dict[str, float]:
    out = {}
    for k in ks:
        hit = ranks <= k
        out[f"R@{k}"] = float(hit.mean())
        gains = np.where(hit, 1.0 / np.log2(ranks + 1), 0.0)
        out[f"N@{k}"] = float(gains.mean())
    return out


def report_from_scores(
    scores: np.ndarray,
    targets: np.ndarray,
    train_lengths: np.ndarray,
    mode: str,
    ks=DEFAULT_KS,
    cold_items: set[int] | None = None,
    restrict_to_cold_targets: bool = False,
    n_groups: int = 5,
) -> MetricsReport:
    """Metrics from a (U, n_items+1) score matrix; column PAD is ignored."""
    targets = np.asarray(targets)
    train_lengths = np.asarray(train_lengths)
    if restrict_to_cold_targets:
        if cold_items is None:
            raise ConfigError("cold evaluation needs the cold item set")
        keep = np.array([t in cold_items for t in targets], dtype=bool)
        scores, targets, train_lengths = scores[keep], targets[keep], train_lengths[keep]
    n = len(targets)
    if n == 0:
        return MetricsReport(mode, tuple(ks), 0, {}, empty=True)

    body = scores[:, 1:]
    tcol = body[np.arange(n), targets - 1]
    # rank = 1 + better + earlier ties (ascending-index tie break)
    better = (body > tcol[:, None]).sum(axis=1)
    tie_earlier = ((body == tcol[:, None]) & (np.arange(1, scores.shape[1])[None, :] < targets[:, None])).sum(axis=1)
    ranks = 1 + better + tie_earlier

    report = MetricsReport(mode, tuple(ks), n, _metrics_for(ranks, ks))
    if n_groups > 0 and n >= n_groups:
        order = np.argsort(train_lengths, kind="stable")
        for gi, chunk in enumerate(np.array_split(order, n_groups)):
            lo, hi = train_lengths[chunk].min(), train_lengths[chunk].max()
            report.groups.append({
                "scope": f"group{gi + 1}(len {lo}-{hi})",
                "n_users": len(chunk),
                "metrics": _metrics_for(ranks[chunk], ks),
            })
    if cold_items is not None and not restrict_to_cold_targets:
        is_cold = np.array([t in cold_items for t in targets], dtype=bool)
        for name, sel in (("cold", is_cold), ("warm", ~is_cold)):
            if sel.any():
                part = {"n_users": int(sel.sum()), "metrics": _metrics_for(ranks[sel], ks)}
            else:
                part = {"n_users": 0, "metrics": {m: float("nan") for m in report.metric_names()}}
            setattr(report, name, part)
    return report


def score_all_users(
    model: M.ModelParams,
    feats: M.ItemFeatures,
    split: SplitBundle,
    mode: str,
    cold_scoring: bool = False,
    chunk: int = 512,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frozen-model full-ranking scores: (scores (U, n_items+1), targets, train lengths)."""
    instances = eval_instances(split, mode, model.max_len)
    rng = K.make_rng(0)  # eval mode draws nothing; placeholder stream
    z_all_t, z_all_v = M.encode_catalog(
        feats, model.text_encoder, model.image_encoder, rng, training=False
    )
    id_table = None if cold_scoring else model.id_table
    stage = "finetune" if model.id_table is not None else "pretrain"
    rows = []
    for start in range(0, len(instances), chunk):
        part = instances[start:start + chunk]
        ids, _ = frame_prefixes([p.prefix for p in part], model.max_len)
        acts = M.m2se_forward_batch(ids, z_all_t, z_all_v, model, stage, rng, training=False)
        sv = L.finetune_scores(acts.h_text, acts.h_image, z_all_t, z_all_v, id_table)
        rows.append(sv.logits.data.copy())
    scores = np.concatenate(rows, axis=0)
    targets = np.array([p.target for p in instances])
    lengths = np.array([len(t) for t in split.train])
    return scores, targets, lengths


def evaluate(
    model: M.ModelParams,
    feats: M.ItemFeatures,
    split: SplitBundle,
    mode: str = "test",
    ks=DEFAULT_KS,
    cold_items: set[int] | None = None,
    cold_mode: bool = False,
    n_groups: int = 5,
) -> MetricsReport:
    """Rank the whole catalog for every user and average per-user metrics.

    cold_mode restricts to users whose target item is cold and scores
    through the ID-free path.
    """
    scores, targets, lengths = score_all_users(model, feats, split, mode, cold_scoring=cold_mode)
    return report_from_scores(
        scores, targets, lengths, mode, ks=ks,
        cold_items=cold_items, restrict_to_cold_targets=cold_mode, n_groups=n_groups,
    )


def quick_metric(model, feats, split, mode: str, metric: str = "R@20") -> float:
    """One scalar metric; used for validation-based early stopping."""
    k = int(metric.split("@")[1])
    scores, targets, lengths = score_all_users(model, feats, split, mode)
    report = report_from_scores(scores, targets, lengths, mode, ks=(k,), n_groups=0)
    return report.overall[metric]


def export_loss_trajectory(logs: list[tuple[str, "TrainLog"]], path) -> int:
    """Figure-style CSV: run_id, epoch, log_train_loss, log_test_loss
    (natural logs). Needs per-epoch test losses from diagnostic mode; the
    train column prefers the eval-mode train loss when it was logged."""
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "epoch", "log_train_loss", "log_test_loss"])
        for run_id, log in logs:
            for row in log.rows:
                if row.test_loss is None:
                    raise ConfigError(f"run {run_id!r} has no test losses; enable diagnostics")
                train = row.train_eval_loss if row.train_eval_loss is not None else row.train_loss
                if train <= 0 or row.test_loss <= 0:
                    raise ContractError("losses must be positive to take logs")
                w.writerow([run_id, row.epoch, f"{math.log(train):.6f}", f"{math.log(row.test_loss):.6f}"])
                rows += 1
    return rows
