"""Multimodal mixup sequence encoder.

Pipeline per forward pass: sequence random dropout (pre-training only),
per-modality attention pooling + mixture-of-experts encoding of each item,
complementary sequence mixup, then a shared Transformer applied to both
mix-modality sequences. The last position's row is the sequence
representation.

Batched paths treat item features as constants packed into padded cubes
aligned to dataset item indices (row 0 = padding, forced to a zero
embedding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .data import PAD, FeatureStore, InteractionDataset
from .errors import ConfigError, ContractError, DataError
from .kernel import NEG_INF, Tensor


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ModalityEncoderParams:
    """Attention layer + mixture-of-experts for one modality."""

    w1: Tensor  # (d, d_a)
    b1: Tensor  # (d_a,)
    w2: Tensor  # (d_a, 1)
    b2: Tensor  # (1,)
    expert_w: list[Tensor]   # O x (d, d0)
    expert_b: list[Tensor]   # O x (d0,)
    expert_ln_g: list[Tensor]
    expert_ln_b: list[Tensor]
    gate_w: Tensor  # (d, O)
    gate_b: Tensor  # (O,)

    @classmethod
    def create(cls, d: int, d_a: int, d0: int, n_experts: int, rng) -> "ModalityEncoderParams":
        if n_experts < 1:
            raise ConfigError("need at least one expert")
        zeros = lambda *s: Tensor(np.zeros(s), requires_grad=True)
        ones = lambda *s: Tensor(np.ones(s), requires_grad=True)
        return cls(
            w1=K.parameter((d, d_a), rng),
            b1=zeros(d_a),
            w2=K.parameter((d_a, 1), rng),
            b2=zeros(1),
            expert_w=[K.parameter((d, d0), rng) for _ in range(n_experts)],
            expert_b=[zeros(d0) for _ in range(n_experts)],
            expert_ln_g=[ones(d0) for _ in range(n_experts)],
            expert_ln_b=[zeros(d0) for _ in range(n_experts)],
            gate_w=K.parameter((d, n_experts), rng),
            gate_b=zeros(n_experts),
        )

    @property
    def n_experts(self) -> int:
        return len(self.expert_w)

    def named(self, prefix: str):
        yield f"{prefix}.w1", self.w1, "weight"
        yield f"{prefix}.b1", self.b1, "bias"
        yield f"{prefix}.w2", self.w2, "weight"
        yield f"{prefix}.b2", self.b2, "bias"
        for k in range(self.n_experts):
            yield f"{prefix}.expert{k}.w", self.expert_w[k], "weight"
            yield f"{prefix}.expert{k}.b", self.expert_b[k], "bias"
            yield f"{prefix}.expert{k}.ln_g", self.expert_ln_g[k], "norm"
            yield f"{prefix}.expert{k}.ln_b", self.expert_ln_b[k], "norm"
        yield f"{prefix}.gate.w", self.gate_w, "weight"
        yield f"{prefix}.gate.b", self.gate_b, "bias"


@dataclass
class TransformerLayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff1_w: Tensor  # (d0, 4*d0)
    ff1_b: Tensor
    ff2_w: Tensor  # (4*d0, d0)
    ff2_b: Tensor

    @classmethod
    def create(cls, d0: int, rng) -> "TransformerLayerParams":
        zeros = lambda *s: Tensor(np.zeros(s), requires_grad=True)
        ones = lambda *s: Tensor(np.ones(s), requires_grad=True)
        return cls(
            ln1_g=ones(d0), ln1_b=zeros(d0),
            wq=K.parameter((d0, d0), rng), bq=zeros(d0),
            wk=K.parameter((d0, d0), rng), bk=zeros(d0),
            wv=K.parameter((d0, d0), rng), bv=zeros(d0),
            wo=K.parameter((d0, d0), rng), bo=zeros(d0),
            ln2_g=ones(d0), ln2_b=zeros(d0),
            ff1_w=K.parameter((d0, 4 * d0), rng), ff1_b=zeros(4 * d0),
            ff2_w=K.parameter((4 * d0, d0), rng), ff2_b=zeros(d0),
        )

    def named(self, prefix: str):
        for f in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            yield f"{prefix}.{f}", getattr(self, f), "norm"
        for f in ("wq", "wk", "wv", "wo", "ff1_w", "ff2_w"):
            yield f"{prefix}.{f}", getattr(self, f), "weight"
        for f in ("bq", "bk", "bv", "bo", "ff1_b", "ff2_b"):
            yield f"{prefix}.{f}", getattr(self, f), "bias"


@dataclass
class TransformerParams:
    pos: Tensor  # (max_len, d0) learned positions
    layers: list[TransformerLayerParams]
    final_g: Tensor
    final_b: Tensor
    n_heads: int

    @classmethod
    def create(cls, d0: int, n_layers: int, n_heads: int, max_len: int, rng) -> "TransformerParams":
        if d0 % n_heads != 0:
            raise ConfigError(f"d0={d0} not divisible by heads={n_heads}")
        return cls(
            pos=K.parameter((max_len, d0), rng),
            layers=[TransformerLayerParams.create(d0, rng) for _ in range(n_layers)],
            final_g=Tensor(np.ones(d0), requires_grad=True),
            final_b=Tensor(np.zeros(d0), requires_grad=True),
            n_heads=n_heads,
        )

    def named(self, prefix: str = "tr"):
        yield f"{prefix}.pos", self.pos, "embedding"
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{i}")
        yield f"{prefix}.final_g", self.final_g, "norm"
        yield f"{prefix}.final_b", self.final_b, "norm"


@dataclass
class ProjectionParams:
    """Maps sequence representations into the two modality feature spaces."""

    w_t: Tensor
    b_t: Tensor
    w_v: Tensor
    b_v: Tensor

    @classmethod
    def create(cls, d0: int, rng) -> "ProjectionParams":
        return cls(
            w_t=K.parameter((d0, d0), rng), b_t=Tensor(np.zeros(d0), requires_grad=True),
            w_v=K.parameter((d0, d0), rng), b_v=Tensor(np.zeros(d0), requires_grad=True),
        )

    def named(self, prefix: str = "proj"):
        yield f"{prefix}.w_t", self.w_t, "weight"
        yield f"{prefix}.b_t", self.b_t, "bias"
        yield f"{prefix}.w_v", self.w_v, "weight"
        yield f"{prefix}.b_v", self.b_v, "bias"


@dataclass
class MixupConfig:
    p_max: float = 0.5
    active: bool = True


@dataclass
class ModelParams:
    d: int
    d_a: int
    d0: int
    max_len: int
    text_encoder: ModalityEncoderParams
    image_encoder: ModalityEncoderParams  # identical object when encoders are shared
    transformer: TransformerParams
    projection: ProjectionParams | None
    id_table: Tensor | None  # (n_items+1, d0); row 0 stays zero

    @property
    def shared_encoders(self) -> bool:
        return self.image_encoder is self.text_encoder

    def named_parameters(self):
        """(name, tensor, kind) triples; aliased encoders are emitted once."""
        if self.shared_encoders:
            yield from self.text_encoder.named("enc.shared")
        else:
            yield from self.text_encoder.named("enc.text")
            yield from self.image_encoder.named("enc.image")
        yield from self.transformer.named()
        if self.projection is not None:
            yield from self.projection.named()
        if self.id_table is not None:
            yield "id_table", self.id_table, "embedding"

    def tensors(self) -> dict[str, Tensor]:
        return {name: t for name, t, _ in self.named_parameters()}


def create_model(
    d: int,
    d_a: int = 64,
    d0: int = 64,
    n_experts: int = 8,
    n_layers: int = 2,
    n_heads: int = 2,
    max_len: int = 50,
    rng=None,
    shared_encoders: bool = False,
    with_projection: bool = True,
    n_items: int | None = None,
    freeze_id_table: bool = False,
) -> ModelParams:
    """Fresh parameters, truncated normal(0, 0.02) weights, zero biases."""
    text = ModalityEncoderParams.create(d, d_a, d0, n_experts, rng)
    image = text if shared_encoders else ModalityEncoderParams.create(d, d_a, d0, n_experts, rng)
    transformer = TransformerParams.create(d0, n_layers, n_heads, max_len, rng)
    projection = ProjectionParams.create(d0, rng) if with_projection else None
    id_table = None
    if n_items is not None:
        id_table = make_id_table(n_items, d0, rng, frozen=freeze_id_table)
    return ModelParams(d, d_a, d0, max_len, text, image, transformer, projection, id_table)


def make_id_table(n_items: int, d0: int, rng, frozen: bool = False) -> Tensor:
    """Learned per-item vectors; pad row zero. Frozen tables stay all-zero
    (the cold-start setting excludes ID embeddings)."""
    if frozen:
        return Tensor(np.zeros((n_items + 1, d0)), requires_grad=False)
    data = K.truncated_normal(rng, (n_items + 1, d0), 0.02)
    data[PAD] = 0.0
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Item features
# ---------------------------------------------------------------------------


class ItemFeatures:
    """Feature-store matrices packed into padded cubes aligned to dataset
    item indices: cube (n_items+1, R, d), mask (n_items+1, R)."""

    def __init__(self, text_cube, text_mask, image_cube, image_mask):
        self.text_cube = np.asarray(text_cube)
        self.text_mask = np.asarray(text_mask, dtype=bool)
        self.image_cube = np.asarray(image_cube)
        self.image_mask = np.asarray(image_mask, dtype=bool)
        if self.text_cube.shape[0] != self.image_cube.shape[0]:
            raise DataError("modality cubes cover different item counts")
        self.n_rows = self.text_cube.shape[0]
        self.d = self.text_cube.shape[2]

    @classmethod
    def from_store(cls, store: FeatureStore, ds: InteractionDataset) -> "ItemFeatures":
        from .data import store_cubes

        (tc, tm), (vc, vm) = store_cubes(store, ds)
        return cls(tc, tm, vc, vm)

    def modality(self, name: str):
        if name == "text":
            return self.text_cube, self.text_mask
        if name == "image":
            return self.image_cube, self.image_mask
        raise ConfigError(f"unknown modality {name!r}")


# ---------------------------------------------------------------------------
# Encoder forward
# ---------------------------------------------------------------------------


def attention_pool(x, params: ModalityEncoderParams):
    """Fuse the rows of one item's feature matrix.

    alpha = softmax((x W1 + b1) W2 + b2) over rows, e = sum_j alpha_j x[j].
    Returns (e, alpha) for a single (rows, d) matrix.
    """
    x = K.as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"attention_pool needs a (rows, d) matrix, got {x.shape}")
    scores = K.add(K.matmul(K.add(K.matmul(x, params.w1), params.b1), params.w2), params.b2)
    alpha = K.softmax(K.reshape(scores, (1, x.shape[0])), axis=-1)
    e = K.reshape(K.matmul(alpha, x), (x.shape[1],))
    return e, K.reshape(alpha, (x.shape[0],))


def moe_forward(e, params: ModalityEncoderParams, rng, training: bool, dropout_rate: float = 0.2):
    """Dense mixture of experts on a pooled embedding: every expert is
    evaluated and combined with softmax gate weights."""
    e = K.as_tensor(e)
    row = K.reshape(e, (1, e.shape[-1]))
    z = _moe_rows(row, params, rng, training, dropout_rate)
    return K.reshape(z, (z.shape[-1],))


def _pool_rows(cube, mask, params: ModalityEncoderParams):
    """Batched attention pooling: cube (n, R, d) const, mask (n, R)."""
    n, r, d = cube.shape
    flat = K.as_tensor(cube.reshape(n * r, d))
    scores = K.add(K.matmul(K.add(K.matmul(flat, params.w1), params.b1), params.w2), params.b2)
    scores = K.reshape(scores, (n, r))
    scores = K.add(scores, K.as_tensor(np.where(mask, 0.0, NEG_INF)))
    alpha = K.softmax(scores, axis=-1)
    weighted = K.mul(K.reshape(alpha, (n, r, 1)), K.as_tensor(cube))
    return K.tsum(weighted, axis=1), alpha  # (n, d)


def _moe_rows(e, params: ModalityEncoderParams, rng, training: bool, dropout_rate: float):
    """Batched MoE: e (n, d) -> (n, d0)."""
    n = e.shape[0]
    outs = []
    for k in range(params.n_experts):
        h = K.add(K.matmul(e, params.expert_w[k]), params.expert_b[k])
        h = K.dropout(h, dropout_rate, rng, training)
        h = K.layer_norm(h, params.expert_ln_g[k], params.expert_ln_b[k])
        outs.append(K.reshape(h, (n, 1, h.shape[-1])))
    experts = K.concat(outs, axis=1)  # (n, O, d0)
    gate = K.softmax(K.add(K.matmul(e, params.gate_w), params.gate_b), axis=-1)
    z = K.tsum(K.mul(K.reshape(gate, (n, params.n_experts, 1)), experts), axis=1)
    return z


def encode_item_rows(cube, mask, params, rng, training, dropout_rate: float = 0.2):
    """attention_pool + MoE over a batch of items: (n, R, d) -> (n, d0)."""
    e, _ = _pool_rows(cube, mask, params)
    return _moe_rows(e, params, rng, training, dropout_rate)


def encode_catalog(feats: ItemFeatures, text_params, image_params, rng, training, dropout_rate: float = 0.2):
    """Every item's modality embeddings for one training step; the pad row is
    forced to zero."""
    zero_pad = np.ones((feats.n_rows, 1))
    zero_pad[PAD] = 0.0
    zt = encode_item_rows(feats.text_cube, feats.text_mask, text_params, rng, training, dropout_rate)
    zv = encode_item_rows(feats.image_cube, feats.image_mask, image_params, rng, training, dropout_rate)
    zero = K.as_tensor(zero_pad)
    return K.mul(zt, zero), K.mul(zv, zero)


def encode_modality(prefix, feats: ItemFeatures, modality: str, params, rng, training, dropout_rate: float = 0.2):
    """Encode one padded prefix: each distinct item is pooled and passed
    through the MoE once; pad positions emit zero rows."""
    prefix = np.asarray(prefix, dtype=np.int64)
    cube, mask = feats.modality(modality)
    if (prefix >= feats.n_rows).any() or (prefix < 0).any():
        raise DataError("prefix references an item without features")
    unique = np.unique(prefix[prefix != PAD])
    if unique.size == 0:
        return K.as_tensor(np.zeros((len(prefix), cube.shape[2])))
    z = encode_item_rows(cube[unique], mask[unique], params, rng, training, dropout_rate)
    slot = {item: i for i, item in enumerate(unique)}
    rows = []
    zero = K.as_tensor(np.zeros((1, z.shape[-1])))
    for item in prefix:
        if item == PAD:
            rows.append(zero)
        else:
            rows.append(K.reshape(K.gather_rows(z, np.array([slot[item]])), (1, z.shape[-1])))
    return K.concat(rows, axis=0)


# ---------------------------------------------------------------------------
# Sequence-level operations
# ---------------------------------------------------------------------------


def sequence_dropout(prefix, rho: float, rng) -> list[int]:
    """Drop each item independently with probability rho, keeping order; if
    everything is dropped the most recent item is retained."""
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"drop ratio must be in [0, 1), got {rho}")
    prefix = list(prefix)
    if rho == 0.0 or len(prefix) == 0:
        return prefix
    keep = rng.random(len(prefix)) >= rho
    kept = [it for it, k in zip(prefix, keep) if k]
    return kept if kept else [prefix[-1]]


def complementary_mixup(z_t: Tensor, z_v: Tensor, pad_mask, config: MixupConfig, rng):
    """Swap text/image rows at Bernoulli(p) positions, p ~ U[0, p_max], with
    one shared mask so the two outputs carry opposite modalities wherever a
    swap happened. Pad positions never swap."""
    if z_t.shape != z_v.shape:
        raise ContractError(f"modality sequences differ in shape: {z_t.shape} vs {z_v.shape}")
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if not config.active:
        return z_t, z_v, np.zeros(pad_mask.shape, dtype=bool), 0.0
    p = float(rng.uniform(0.0, config.p_max))
    swap = (rng.random(pad_mask.shape) < p) & pad_mask
    m_t = K.select(swap, z_v, z_t)
    m_v = K.select(swap, z_t, z_v)
    return m_t, m_v, swap, p


def transformer_encode(
    m: Tensor,
    pad_mask,
    params: TransformerParams,
    rng,
    training: bool,
    dropout_rate: float = 0.2,
    pos_offset: int = 0,
    identity_norms: bool = False,
):
    """Causal + pad-masked pre-norm Transformer over a right-aligned batch.

    m: (B, S, d0); pad_mask: (B, S) bool. Positions are absolute frame
    positions pos_offset..pos_offset+S-1 so cropped frames match full ones.
    Returns (H, h) where h is the last position's row. `identity_norms`
    bypasses every layer norm; it exists for residual-wiring diagnostics.
    """
    b, s, d0 = m.shape
    heads = params.n_heads
    hd = d0 // heads
    pad_mask = np.asarray(pad_mask, dtype=bool)

    def norm(x, g, bb):
        return x if identity_norms else K.layer_norm(x, g, bb)

    pos_rows = K.gather_rows(params.pos, np.arange(pos_offset, pos_offset + s))
    x = K.add(m, pos_rows)

    causal = np.tril(np.ones((s, s), dtype=bool))
    allow = causal[None, :, :] & pad_mask[:, None, :]
    bias = K.as_tensor(np.where(allow, 0.0, NEG_INF)[:, None, :, :])  # (B, 1, S, S)

    def split_heads(t):
        return K.transpose(K.reshape(t, (b, s, heads, hd)), (0, 2, 1, 3))

    for layer in params.layers:
        y = norm(x, layer.ln1_g, layer.ln1_b)
        flat = K.reshape(y, (b * s, d0))
        q = split_heads(K.reshape(K.add(K.matmul(flat, layer.wq), layer.bq), (b, s, d0)))
        k = split_heads(K.reshape(K.add(K.matmul(flat, layer.wk), layer.bk), (b, s, d0)))
        v = split_heads(K.reshape(K.add(K.matmul(flat, layer.wv), layer.bv), (b, s, d0)))
        scores = K.scale(K.matmul(q, K.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        probs = K.softmax(K.add(scores, bias), axis=-1)
        probs = K.dropout(probs, dropout_rate, rng, training)
        ctx = K.reshape(K.transpose(K.matmul(probs, v), (0, 2, 1, 3)), (b * s, d0))
        ctx = K.dropout(K.add(K.matmul(ctx, layer.wo), layer.bo), dropout_rate, rng, training)
        x = K.add(x, K.reshape(ctx, (b, s, d0)))

        y = K.reshape(norm(x, layer.ln2_g, layer.ln2_b), (b * s, d0))
        f = K.relu(K.add(K.matmul(y, layer.ff1_w), layer.ff1_b))
        f = K.add(K.matmul(f, layer.ff2_w), layer.ff2_b)
        f = K.dropout(f, dropout_rate, rng, training)
        x = K.add(x, K.reshape(f, (b, s, d0)))

    h_all = norm(x, params.final_g, params.final_b)
    return h_all, K.take_position(h_all, s - 1)


@dataclass
class SequenceActivations:
    """Everything one forward pass produces for a batch of sequences."""

    z_text: Tensor      # (B, S, d0)
    z_image: Tensor
    swap_mask: np.ndarray  # (B, S) bool
    p: float
    m_text: Tensor
    m_image: Tensor
    seq_text: Tensor    # Transformer outputs (B, S, d0)
    seq_image: Tensor
    h_text: Tensor      # (B, d0)
    h_image: Tensor
    pad_mask: np.ndarray
    pos_offset: int


def crop_frames(ids: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop all-pad leading columns shared by the whole batch; returns the
    cropped frame and its absolute position offset."""
    nonpad = ids != PAD
    cols = nonpad.any(axis=0)
    if not cols.any():
        raise ContractError("batch contains only padding")
    start = int(cols.argmax())
    return ids[:, start:], start


def m2se_forward_batch(
    ids: np.ndarray,
    z_all_t: Tensor,
    z_all_v: Tensor,
    model: ModelParams,
    stage: str,
    rng,
    training: bool,
    mixup: MixupConfig | None = None,
    hidden_dropout: float = 0.2,
) -> SequenceActivations:
    """Sequence forward over pre-encoded catalog embeddings.

    ids is a right-aligned (B, max_len) frame; sequence random dropout is
    applied by the caller before framing.
    """
    if stage not in ("pretrain", "finetune"):
        raise ConfigError(f"unknown stage {stage!r}")
    if stage == "finetune" and model.id_table is None:
        raise ConfigError("fine-tuning requires an ID embedding table")
    ids, offset = crop_frames(np.asarray(ids))
    pad_mask = ids != PAD
    z_t = K.gather_rows(z_all_t, ids)  # (B, S, d0)
    z_v = K.gather_rows(z_all_v, ids)

    if stage == "pretrain":
        cfg = mixup if mixup is not None else MixupConfig()
        if not training:
            cfg = MixupConfig(p_max=cfg.p_max, active=False)
        m_t, m_v, swap, p = complementary_mixup(z_t, z_v, pad_mask, cfg, rng)
    else:
        e_s = K.gather_rows(model.id_table, ids)
        m_t = K.add(z_t, e_s)
        m_v = K.add(z_v, e_s)
        swap, p = np.zeros(ids.shape, dtype=bool), 0.0

    seq_t, h_t = transformer_encode(
        m_t, pad_mask, model.transformer, rng, training, hidden_dropout, pos_offset=offset
    )
    seq_v, h_v = transformer_encode(
        m_v, pad_mask, model.transformer, rng, training, hidden_dropout, pos_offset=offset
    )
    return SequenceActivations(
        z_text=z_t, z_image=z_v, swap_mask=swap, p=p,
        m_text=m_t, m_image=m_v, seq_text=seq_t, seq_image=seq_v,
        h_text=h_t, h_image=h_v, pad_mask=pad_mask, pos_offset=offset,
    )


def m2se_forward(
    prefix,
    feats: ItemFeatures,
    model: ModelParams,
    stage: str,
    rng,
    training: bool = False,
    rho: float = 0.0,
    mixup: MixupConfig | None = None,
    hidden_dropout: float = 0.2,
) -> SequenceActivations:
    """Single-sequence forward from raw features, including sequence random
    dropout during pre-training."""
    from .data import frame_prefixes

    prefix = [int(x) for x in prefix if int(x) != PAD]
    if not prefix:
        raise ContractError("prefix has no items")
    if stage == "pretrain" and training and rho > 0.0:
        prefix = sequence_dropout(prefix, rho, rng)
    ids, _ = frame_prefixes([prefix], model.max_len)
    z_all_t, z_all_v = encode_catalog(
        feats, model.text_encoder, model.image_encoder, rng, training, hidden_dropout
    )
    return m2se_forward_batch(
        ids, z_all_t, z_all_v, model, stage, rng, training, mixup=mixup, hidden_dropout=hidden_dropout
    )
