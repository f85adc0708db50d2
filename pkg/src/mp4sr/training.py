"""Optimization: Adam with decoupled weight decay, the pre-training loop,
fine-tuning with validation-based early stopping, end-to-end and ablation
variants, and exact checkpoint resume."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import evaluation as E
from . import kernel as K
from . import losses as L
from . import model as M
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    FeatureStore,
    InteractionDataset,
    build_instances,
    eval_instances,
    frame_prefixes,
    leave_one_out_split,
)
from .errors import ConfigError, NonFiniteError

VARIANTS = frozenset({
    "resnet-features", "no-nip", "no-cmcl", "no-cmixup",
    "no-pretrain", "no-proj", "e2e", "shared-encoders", "cold-start",
})


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the published configuration."""

    stage: str = "pretrain"
    learning_rate: float = 0.001
    batch_size: int = 1024
    epochs: int = 300
    rho: float = 0.2               # sequence random dropout
    tau: float = 0.07              # contrastive temperature
    lam: float = 0.01              # CMCL weight
    n_experts: int = 8
    d_a: int = 64
    d_0: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    weight_decay: float = 0.0
    seed: int = 42
    variants: tuple[str, ...] = ()
    early_stop_patience: int = 10
    hidden_dropout: float = 0.2    # dropout inside MoE and Transformer
    p_max: float = 0.5             # mixup ratio upper bound
    diagnostics: bool = False      # log per-epoch test loss

    def validate(self) -> None:
        flags = set(self.variants)
        unknown = flags - VARIANTS
        if unknown:
            raise ConfigError(f"unknown variants: {sorted(unknown)}")
        if "resnet-features" in flags:
            raise ConfigError("the resnet-features variant is not supported in this build")
        if {"no-nip", "no-cmcl"} <= flags:
            raise ConfigError("no-nip and no-cmcl together leave no pre-training objective")
        if {"e2e", "no-pretrain"} <= flags:
            raise ConfigError("e2e and no-pretrain contradict each other")
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not 0 <= self.rho < 1:
            raise ConfigError("rho must be in [0, 1)")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigError("bad optimizer settings")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        if "variants" in raw:
            raw["variants"] = tuple(raw["variants"])
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def with_variants(self, *extra: str) -> "TrainConfig":
        return dataclasses.replace(self, variants=tuple(sorted(set(self.variants) | set(extra))))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam (b1=0.9, b2=0.999, eps=1e-8) with decoupled weight decay applied
    to weight matrices only: never to biases, norm affines, or embeddings."""

    def __init__(self, named_params, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.entries = [(name, t, kind) for name, t, kind in named_params]
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t, _ in self.entries}
        self.v = {name: np.zeros_like(t.data) for name, t, _ in self.entries}

    def step(self) -> None:
        """Consume .grad on every tracked tensor and update in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, tensor, kind in self.entries:
            if not tensor.requires_grad:  # frozen (e.g. cold-start ID table)
                continue
            g = tensor.grad
            if g is None:
                raise ConfigError(f"parameter {name!r} has no gradient; was it watched?")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient in {name!r}")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            if self.weight_decay and kind == "weight":
                tensor.data -= self.lr * self.weight_decay * tensor.data
            tensor.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name].copy()
            out[f"adam.v.{name}"] = self.v[name].copy()
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name] = tensors[f"adam.m.{name}"].astype(self.m[name].dtype)
            self.v[name] = tensors[f"adam.v.{name}"].astype(self.v[name].dtype)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# Logs and state
# ---------------------------------------------------------------------------


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float              # mean optimization loss over the epoch
    val_r20: float | None = None
    test_loss: float | None = None        # diagnostics: eval-mode loss on test pairs
    train_eval_loss: float | None = None  # diagnostics: eval-mode loss on train pairs


@dataclass
class TrainLog:
    rows: list[TrainLogRow] = field(default_factory=list)

    def append(self, epoch, train_loss, val_r20=None, test_loss=None, train_eval_loss=None):
        self.rows.append(TrainLogRow(epoch, train_loss, val_r20, test_loss, train_eval_loss))

    def to_csv(self, path) -> None:
        with_test = any(r.test_loss is not None for r in self.rows)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            header = ["epoch", "train_loss", "val_r20"]
            if with_test:
                header += ["test_loss", "train_eval_loss"]
            w.writerow(header)
            for r in self.rows:
                row = [r.epoch, f"{r.train_loss:.8f}", "" if r.val_r20 is None else f"{r.val_r20:.8f}"]
                if with_test:
                    row.append("" if r.test_loss is None else f"{r.test_loss:.8f}")
                    row.append("" if r.train_eval_loss is None else f"{r.train_eval_loss:.8f}")
                w.writerow(row)


@dataclass
class TrainState:
    model: M.ModelParams
    optimizer: Adam
    data_rng: np.random.Generator
    model_rng: np.random.Generator
    epoch: int = 0
    log: TrainLog = field(default_factory=TrainLog)
    best_val: float | None = None
    best_epoch: int = 0
    bad_epochs: int = 0
    best_tensors: dict[str, np.ndarray] | None = None


def prepare_data(config: TrainConfig, dataset: InteractionDataset, store: FeatureStore):
    split = leave_one_out_split(dataset)
    instances = build_instances(split, config.stage, config.max_len)
    feats = M.ItemFeatures.from_store(store, dataset)
    return split, instances, feats


def _new_state(config: TrainConfig, feats: M.ItemFeatures, with_id: bool,
               n_items: int, freeze_id: bool = False) -> TrainState:
    init_rng, data_rng, model_rng = K.spawn_rngs(config.seed, 3)
    flags = set(config.variants)
    model = M.create_model(
        d=feats.d, d_a=config.d_a, d0=config.d_0, n_experts=config.n_experts,
        n_layers=config.n_layers, n_heads=config.n_heads, max_len=config.max_len,
        rng=init_rng, shared_encoders="shared-encoders" in flags,
        with_projection="no-proj" not in flags,
        n_items=n_items if with_id else None, freeze_id_table=freeze_id,
    )
    optimizer = Adam(list(model.named_parameters()), config.learning_rate, config.weight_decay)
    return TrainState(model=model, optimizer=optimizer, data_rng=data_rng, model_rng=model_rng)


def _param_snapshot(model: M.ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t, _ in model.named_parameters()}


def _restore_params(model: M.ModelParams, snap: dict[str, np.ndarray]) -> None:
    for name, t, _ in model.named_parameters():
        t.data = snap[name].copy().astype(t.data.dtype)


def _watch_all(tape: K.Tape, model: M.ModelParams) -> None:
    tape.watch(*[t for _, t, _ in model.named_parameters()])


# ---------------------------------------------------------------------------
# Checkpoint plumbing
# ---------------------------------------------------------------------------


def state_checkpoint(state: TrainState, config: TrainConfig) -> Checkpoint:
    tensors = {name: t.data.copy() for name, t, _ in state.model.named_parameters()}
    tensors.update(state.optimizer.state_tensors())
    model = state.model
    extra = {
        "adam_t": state.optimizer.t,
        "model": {
            "d": model.d,
            "n_items": None if model.id_table is None else model.id_table.shape[0] - 1,
            "id_frozen": model.id_table is not None and not model.id_table.requires_grad,
        },
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
        "log_rows": [[r.epoch, r.train_loss, r.val_r20, r.test_loss] for r in state.log.rows],
    }
    return Checkpoint(
        tensors=tensors, config=config.to_dict(), epoch=state.epoch,
        best_metric=state.best_val,
        rng={"data": K.rng_state(state.data_rng), "model": K.rng_state(state.model_rng)},
        extra=extra,
    )


def save_state(state: TrainState, config: TrainConfig, path) -> None:
    save_checkpoint(path, state_checkpoint(state, config))


def load_state(path, feats: M.ItemFeatures) -> tuple[TrainState, TrainConfig]:
    """Rebuild a TrainState that resumes bit-exactly."""
    ckpt = load_checkpoint(path)
    config = TrainConfig.from_dict(ckpt.config)
    meta = ckpt.extra["model"]
    if meta["d"] != feats.d:
        raise ConfigError(f"checkpoint was trained on d={meta['d']}, store has d={feats.d}")
    state = _new_state(
        config, feats, with_id=meta["n_items"] is not None,
        n_items=meta["n_items"] or 0, freeze_id=meta["id_frozen"],
    )
    for name, t, _ in state.model.named_parameters():
        t.data = ckpt.tensors[name].astype(t.data.dtype)
    state.optimizer.load_state(ckpt.tensors, ckpt.extra["adam_t"])
    state.data_rng = K.restore_rng(ckpt.rng["data"])
    state.model_rng = K.restore_rng(ckpt.rng["model"])
    state.epoch = ckpt.epoch
    state.best_val = ckpt.best_metric
    state.best_epoch = ckpt.extra.get("best_epoch", 0)
    state.bad_epochs = ckpt.extra.get("bad_epochs", 0)
    for epoch, tl, vr, ts in ckpt.extra.get("log_rows", []):
        state.log.append(epoch, tl, vr, ts)
    return state, config


def transfer_tensors(target: M.ModelParams, tensors: dict[str, np.ndarray]) -> int:
    """Copy pre-trained weights into a model by name; the ID table and any
    missing names are left at their fresh initialization."""
    copied = 0
    for name, t, _ in target.named_parameters():
        if name == "id_table" or name not in tensors:
            continue
        if tuple(tensors[name].shape) != t.shape:
            raise ConfigError(f"checkpoint tensor {name!r} has shape {tensors[name].shape}, expected {t.shape}")
        t.data = tensors[name].astype(t.data.dtype)
        copied += 1
    return copied


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------


def _pretrain_step(state: TrainState, config: TrainConfig, feats, ids, targets, mixcfg) -> float:
    model = state.model
    flags = set(config.variants)
    with K.Tape() as tape:
        _watch_all(tape, model)
        z_all_t, z_all_v = M.encode_catalog(
            feats, model.text_encoder, model.image_encoder,
            state.model_rng, True, config.hidden_dropout,
        )
        acts = M.m2se_forward_batch(
            ids, z_all_t, z_all_v, model, "pretrain", state.model_rng, True,
            mixup=mixcfg, hidden_dropout=config.hidden_dropout,
        )
        parts = L.pretrain_loss(
            acts.h_text, acts.h_image,
            K.gather_rows(z_all_t, targets), K.gather_rows(z_all_v, targets),
            model.projection, config.tau, config.lam,
            use_nip="no-nip" not in flags, use_cmcl="no-cmcl" not in flags,
        )
    loss = parts.total.item()
    K.backward(tape, parts.total)
    state.optimizer.step()
    return loss


def _pretrain_epoch(state: TrainState, config: TrainConfig, instances, feats) -> float:
    mixcfg = M.MixupConfig(p_max=config.p_max, active="no-cmixup" not in set(config.variants))
    order = state.data_rng.permutation(len(instances))
    total = 0.0
    for start in range(0, len(instances), config.batch_size):
        chunk = [instances[i] for i in order[start:start + config.batch_size]]
        prefixes = [
            M.sequence_dropout(inst.prefix, config.rho, state.model_rng) if config.rho > 0
            else list(inst.prefix)
            for inst in chunk
        ]
        ids, _ = frame_prefixes(prefixes, config.max_len)
        targets = np.array([inst.target for inst in chunk], dtype=np.int64)
        total += _pretrain_step(state, config, feats, ids, targets, mixcfg)
    return total / len(instances)


def pretrain(
    config: TrainConfig,
    dataset: InteractionDataset,
    store: FeatureStore,
    state: TrainState | None = None,
    epochs: int | None = None,
    checkpoint_path=None,
    log_path=None,
) -> TrainState:
    """Optimize the combined contrastive objective for a fixed number of
    epochs (no early stopping). Resumable from a saved state."""
    config = dataclasses.replace(config, stage="pretrain")
    config.validate()
    split, instances, feats = prepare_data(config, dataset, store)
    if state is None:
        state = _new_state(config, feats, with_id=False, n_items=dataset.n_items)
    target_epochs = config.epochs if epochs is None else epochs
    last_good = state_checkpoint(state, config)
    while state.epoch < target_epochs:
        try:
            mean_loss = _pretrain_epoch(state, config, instances, feats)
        except NonFiniteError:
            if checkpoint_path is not None:
                save_checkpoint(str(checkpoint_path) + ".aborted", last_good)
            raise
        state.epoch += 1
        state.log.append(state.epoch, mean_loss)
        last_good = state_checkpoint(state, config)
    if checkpoint_path is not None:
        save_state(state, config, checkpoint_path)
    if log_path is not None:
        state.log.to_csv(log_path)
    return state


# ---------------------------------------------------------------------------
# Fine-tuning (and the end-to-end variant)
# ---------------------------------------------------------------------------


def _finetune_step(state, config, feats, ids, targets, e2e_parts=None) -> float:
    """One supervised step; e2e_parts carries (mixcfg, raw prefixes) when the
    e2e variant adds the pre-training objective."""
    model = state.model
    flags = set(config.variants)
    with K.Tape() as tape:
        _watch_all(tape, model)
        z_all_t, z_all_v = M.encode_catalog(
            feats, model.text_encoder, model.image_encoder,
            state.model_rng, True, config.hidden_dropout,
        )
        acts = M.m2se_forward_batch(
            ids, z_all_t, z_all_v, model, "finetune", state.model_rng, True,
            hidden_dropout=config.hidden_dropout,
        )
        logits = L.finetune_logits(acts.h_text, acts.h_image, z_all_t, z_all_v, model.id_table)
        loss = L.finetune_loss(logits, targets)
        if e2e_parts is not None:
            mixcfg, prefixes = e2e_parts
            dropped = [
                M.sequence_dropout(p, config.rho, state.model_rng) if config.rho > 0 else list(p)
                for p in prefixes
            ]
            pre_ids, _ = frame_prefixes(dropped, config.max_len)
            pre_acts = M.m2se_forward_batch(
                pre_ids, z_all_t, z_all_v, model, "pretrain", state.model_rng, True,
                mixup=mixcfg, hidden_dropout=config.hidden_dropout,
            )
            parts = L.pretrain_loss(
                pre_acts.h_text, pre_acts.h_image,
                K.gather_rows(z_all_t, targets), K.gather_rows(z_all_v, targets),
                model.projection, config.tau, config.lam,
                use_nip="no-nip" not in flags, use_cmcl="no-cmcl" not in flags,
            )
            loss = K.add(loss, parts.total)
    value = loss.item()
    K.backward(tape, loss)
    state.optimizer.step()
    return value


def _mean_eval_loss(model, feats, instances, max_len: int) -> float:
    """Eval-mode cross entropy per instance (diagnostics)."""
    rng = K.make_rng(0)
    z_all_t, z_all_v = M.encode_catalog(feats, model.text_encoder, model.image_encoder, rng, False)
    total = 0.0
    for start in range(0, len(instances), 512):
        part = instances[start:start + 512]
        ids, _ = frame_prefixes([p.prefix for p in part], max_len)
        acts = M.m2se_forward_batch(ids, z_all_t, z_all_v, model, "finetune", rng, False)
        logits = L.finetune_logits(acts.h_text, acts.h_image, z_all_t, z_all_v, model.id_table)
        total += L.finetune_loss(logits, np.array([p.target for p in part])).item()
    return total / len(instances)


def finetune(
    config: TrainConfig,
    dataset: InteractionDataset,
    store: FeatureStore,
    init: dict[str, np.ndarray] | None = None,
    cold_start: bool = False,
    e2e: bool = False,
    early_stop: bool = True,
    validate: bool | None = None,
    checkpoint_path=None,
    log_path=None,
) -> TrainState:
    """Supervised next-item training with premature stopping when validation
    R@20 has not increased for `early_stop_patience` epochs; returns the
    best-validation parameters. `validate=False` (only meaningful with
    early stopping off) skips the per-epoch validation pass."""
    config = dataclasses.replace(config, stage="finetune")
    config.validate()
    flags = set(config.variants)
    cold_start = cold_start or "cold-start" in flags
    e2e = e2e or "e2e" in flags
    if validate is None:
        validate = True
    if early_stop and not validate:
        raise ConfigError("early stopping needs per-epoch validation")
    split, instances, feats = prepare_data(config, dataset, store)
    test_insts = eval_instances(split, "test", config.max_len) if config.diagnostics else None
    state = _new_state(config, feats, with_id=True, n_items=dataset.n_items, freeze_id=cold_start)
    if init is not None:
        transfer_tensors(state.model, init)
    mixcfg = M.MixupConfig(p_max=config.p_max, active="no-cmixup" not in flags)
    last_good = state_checkpoint(state, config)
    while state.epoch < config.epochs:
        try:
            total = 0.0
            order = state.data_rng.permutation(len(instances))
            for start in range(0, len(instances), config.batch_size):
                chunk = [instances[i] for i in order[start:start + config.batch_size]]
                ids, _ = frame_prefixes([c.prefix for c in chunk], config.max_len)
                targets = np.array([c.target for c in chunk], dtype=np.int64)
                e2e_parts = (mixcfg, [c.prefix for c in chunk]) if e2e else None
                total += _finetune_step(state, config, feats, ids, targets, e2e_parts)
        except NonFiniteError:
            if checkpoint_path is not None:
                save_checkpoint(str(checkpoint_path) + ".aborted", last_good)
            raise
        state.epoch += 1
        mean_loss = total / len(instances)
        val = E.quick_metric(state.model, feats, split, "valid", "R@20") if validate else None
        test_loss = train_eval = None
        if test_insts:
            test_loss = _mean_eval_loss(state.model, feats, test_insts, config.max_len)
            train_eval = _mean_eval_loss(state.model, feats, instances, config.max_len)
        state.log.append(state.epoch, mean_loss, val, test_loss, train_eval)
        last_good = state_checkpoint(state, config)
        if val is None:
            continue
        if state.best_val is None or val > state.best_val:
            state.best_val = val
            state.best_epoch = state.epoch
            state.bad_epochs = 0
            state.best_tensors = _param_snapshot(state.model)
        else:
            state.bad_epochs += 1
            if early_stop and state.bad_epochs >= config.early_stop_patience:
                break
    if early_stop and state.best_tensors is not None:
        _restore_params(state.model, state.best_tensors)
    if checkpoint_path is not None:
        save_state(state, config, checkpoint_path)
    if log_path is not None:
        state.log.to_csv(log_path)
    return state


# ---------------------------------------------------------------------------
# Variant dispatch
# ---------------------------------------------------------------------------


def run_variant(
    variants,
    config: TrainConfig,
    dataset: InteractionDataset,
    store: FeatureStore,
    pretrain_epochs: int | None = None,
) -> dict:
    """Full pipeline for one ablation variant; returns test metrics plus the
    fine-tuning log."""
    cfg = config.with_variants(*variants)
    cfg.validate()
    flags = set(cfg.variants)
    init = None
    pre_state = None
    if "e2e" in flags:
        state = finetune(cfg, dataset, store, e2e=True)
    else:
        if "no-pretrain" not in flags:
            pre_state = pretrain(
                cfg, dataset, store,
                epochs=pretrain_epochs if pretrain_epochs is not None else cfg.epochs,
            )
            init = _param_snapshot(pre_state.model)
        state = finetune(cfg, dataset, store, init=init, cold_start="cold-start" in flags)
    split = leave_one_out_split(dataset)
    feats = M.ItemFeatures.from_store(store, dataset)
    report = E.evaluate(state.model, feats, split, "test")
    return {
        "variants": tuple(sorted(flags)),
        "report": report,
        "val_r20": state.best_val,
        "best_epoch": state.best_epoch,
        "log": state.log,
        "pretrain_log": None if pre_state is None else pre_state.log,
        "state": state,
    }


ABLATION_SET = (
    (),
    ("no-nip",),
    ("no-cmcl",),
    ("no-cmixup",),
    ("no-pretrain",),
    ("no-proj",),
    ("e2e",),
    ("shared-encoders",),
)


def ablation_table(config: TrainConfig, dataset, store, pretrain_epochs=None) -> list[dict]:
    """Run every in-scope variant end to end; one comparison row each."""
    rows = []
    for variants in ABLATION_SET:
        result = run_variant(variants, config, dataset, store, pretrain_epochs=pretrain_epochs)
        name = "full" if not variants else "+".join(variants)
        rows.append({"variant": name, **{m: result["report"].overall[m] for m in result["report"].metric_names()}})
    return rows


def grid_search(
    config: TrainConfig,
    dataset,
    store,
    init: dict[str, np.ndarray] | None = None,
    learning_rates=(0.0001, 0.0005, 0.001),
    batch_sizes=(256, 512, 1024),
    weight_decays=(0.0001, 0.0005, 0.001),
) -> tuple[TrainConfig, list[dict]]:
    """Validation-R@20 grid over the published fine-tuning search space."""
    results = []
    best_cfg, best_val = None, -1.0
    for lr in learning_rates:
        for bs in batch_sizes:
            for wd in weight_decays:
                cfg = dataclasses.replace(config, learning_rate=lr, batch_size=bs, weight_decay=wd)
                state = finetune(cfg, dataset, store, init=init)
                results.append({"learning_rate": lr, "batch_size": bs, "weight_decay": wd,
                                "val_r20": state.best_val, "best_epoch": state.best_epoch})
                if state.best_val is not None and state.best_val > best_val:
                    best_val, best_cfg = state.best_val, cfg
    return best_cfg, results
