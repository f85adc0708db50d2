"""Interaction loading, k-core filtering, splits, batching, feature stores,
and the planted-signal synthetic generator.

Item index 0 is reserved for padding everywhere; real items are 1-based.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError

PAD = 0
MAX_FEATURE_ROWS = 10
STORE_MAGIC = b"MP4SRFS1"
STORE_VERSION = 1


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


class InteractionDataset:
    """Per-user chronological item-index sequences with id maps."""

    def __init__(self, user_ids, item_ids, sequences):
        self.user_ids = list(user_ids)  # user index -> id
        self.item_ids = list(item_ids)  # item index -> id; [0] is the pad slot
        self.sequences = [list(s) for s in sequences]
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.item_index = {it: i for i, it in enumerate(self.item_ids) if i != PAD}

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids) - 1

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def avg_length(self) -> float:
        return self.n_interactions / max(1, self.n_users)

    @classmethod
    def from_interactions(cls, interactions: list[Interaction]) -> "InteractionDataset":
        if not interactions:
            raise DataError("no interactions to build a dataset from")
        per_user: dict[str, list[tuple[int, str]]] = {}
        user_ids: list[str] = []
        item_ids: list[str] = [""]  # pad slot
        item_index: dict[str, int] = {}
        for row in interactions:
            if row.user_id not in per_user:
                per_user[row.user_id] = []
                user_ids.append(row.user_id)
            if row.item_id not in item_index:
                item_index[row.item_id] = len(item_ids)
                item_ids.append(row.item_id)
            per_user[row.user_id].append((row.timestamp, row.item_id))
        sequences = []
        for u in user_ids:
            rows = sorted(per_user[u], key=lambda r: r[0])  # stable: ties keep file order
            sequences.append([item_index[it] for _, it in rows])
        return cls(user_ids, item_ids, sequences)


def load_interactions(path) -> InteractionDataset:
    """Parse a UTF-8 TSV of user_id, item_id, timestamp with a header line."""
    interactions = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != ["user_id", "item_id", "timestamp"]:
            raise DataError(f"{path}: bad header line {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: malformed row {line!r}")
            try:
                ts = int(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from None
            if ts < 0:
                raise DataError(f"{path}:{lineno}: negative timestamp")
            interactions.append(Interaction(parts[0], parts[1], ts))
    if not interactions:
        raise DataError(f"{path}: file has no interactions")
    return InteractionDataset.from_interactions(interactions)


def write_interactions(ds: InteractionDataset, path) -> None:
    """Write the dataset back out; timestamps are sequence positions."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\ttimestamp\n")
        for u, seq in zip(ds.user_ids, ds.sequences):
            for t, item in enumerate(seq):
                fh.write(f"{u}\t{ds.item_ids[item]}\t{t}\n")


def kcore_filter(ds: InteractionDataset, k: int) -> InteractionDataset:
    """Iteratively drop users and items with fewer than k interactions until
    nothing changes, then reindex compactly."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    seqs = {u: list(s) for u, s in enumerate(ds.sequences)}
    while True:
        item_counts: dict[int, int] = {}
        for s in seqs.values():
            for it in s:
                item_counts[it] = item_counts.get(it, 0) + 1
        bad_items = {it for it, c in item_counts.items() if c < k}
        changed = False
        if bad_items:
            for u in list(seqs):
                kept = [it for it in seqs[u] if it not in bad_items]
                if len(kept) != len(seqs[u]):
                    seqs[u] = kept
                    changed = True
        bad_users = [u for u, s in seqs.items() if len(s) < k]
        for u in bad_users:
            del seqs[u]
            changed = True
        if not changed:
            break
    if not seqs:
        raise DataError(f"{k}-core filtering removed everything")
    users = sorted(seqs)
    kept_items = sorted({it for u in users for it in seqs[u]})
    remap = {it: j + 1 for j, it in enumerate(kept_items)}
    return InteractionDataset(
        [ds.user_ids[u] for u in users],
        [""] + [ds.item_ids[it] for it in kept_items],
        [[remap[it] for it in seqs[u]] for u in users],
    )


@dataclass
class SplitBundle:
    """Per-user leave-one-out split over a dataset's users."""

    dataset: InteractionDataset
    users: list[int]           # dataset user indices that were splittable
    train: list[list[int]]
    valid: list[int]
    test: list[int]
    n_excluded: int = 0


def leave_one_out_split(ds: InteractionDataset) -> SplitBundle:
    """Last item to test, second-last to validation, remainder to train.
    Users with fewer than 3 interactions are excluded and counted."""
    users, train, valid, test = [], [], [], []
    excluded = 0
    for u, seq in enumerate(ds.sequences):
        if len(seq) < 3:
            excluded += 1
            continue
        users.append(u)
        train.append(seq[:-2])
        valid.append(seq[-2])
        test.append(seq[-1])
    return SplitBundle(ds, users, train, valid, test, n_excluded=excluded)


@dataclass(frozen=True)
class TrainingInstance:
    prefix: tuple[int, ...]
    target: int


def build_instances(split: SplitBundle, stage: str = "pretrain", max_len: int = 50) -> list[TrainingInstance]:
    """All next-item prefix pairs from each user's train sequence; prefixes
    keep the most recent max_len items. Identical for both stages."""
    if stage not in ("pretrain", "finetune"):
        raise ConfigError(f"unknown stage {stage!r}")
    out = []
    for seq in split.train:
        for m in range(1, len(seq)):
            prefix = seq[max(0, m - max_len):m]
            out.append(TrainingInstance(tuple(prefix), seq[m]))
    return out


def eval_instances(split: SplitBundle, mode: str, max_len: int = 50) -> list[TrainingInstance]:
    """Evaluation pairs: valid targets use the train prefix, test targets use
    train + valid."""
    if mode not in ("valid", "test"):
        raise ConfigError(f"unknown eval mode {mode!r}")
    out = []
    for seq, v, t in zip(split.train, split.valid, split.test):
        if mode == "valid":
            prefix, target = seq, v
        else:
            prefix, target = seq + [v], t
        out.append(TrainingInstance(tuple(prefix[-max_len:]), target))
    return out


@dataclass
class TrainingBatch:
    ids: np.ndarray      # (B, max_len) int32, right-aligned, 0 = pad
    mask: np.ndarray     # (B, max_len) bool, True on real items
    targets: np.ndarray  # (B,) int32


def frame_prefixes(prefixes, max_len: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Right-align variable-length prefixes into a padded index matrix."""
    ids = np.zeros((len(prefixes), max_len), dtype=np.int32)
    for i, p in enumerate(prefixes):
        p = list(p)[-max_len:]
        if not p:
            raise ContractError("empty prefix cannot be framed")
        ids[i, max_len - len(p):] = p
    return ids, ids != PAD


def make_batches(instances, batch_size: int, rng: np.random.Generator, max_len: int = 50) -> list[TrainingBatch]:
    """Shuffle instances with the given rng and emit right-aligned padded
    batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(instances))
    batches = []
    for start in range(0, len(instances), batch_size):
        chunk = [instances[i] for i in order[start:start + batch_size]]
        ids, mask = frame_prefixes([c.prefix for c in chunk], max_len)
        targets = np.array([c.target for c in chunk], dtype=np.int32)
        batches.append(TrainingBatch(ids, mask, targets))
    return batches


def cold_item_partition(split: SplitBundle, threshold: int = 10) -> tuple[set[int], set[int]]:
    """Items with fewer than `threshold` occurrences in the train portions are
    cold; everything else in the catalog is warm."""
    counts: dict[int, int] = {}
    for seq in split.train:
        for it in seq:
            counts[it] = counts.get(it, 0) + 1
    all_items = set(range(1, split.dataset.n_items + 1))
    cold = {it for it in all_items if counts.get(it, 0) < threshold}
    return cold, all_items - cold


# ---------------------------------------------------------------------------
# Feature store
# ---------------------------------------------------------------------------


class FeatureStore:
    """Per-item stacked text and image feature matrices, one d across items."""

    def __init__(self, d: int, text: dict[str, np.ndarray], image: dict[str, np.ndarray]):
        self.d = int(d)
        self.text = text
        self.image = image
        self.validate()

    def validate(self) -> None:
        if set(self.text) != set(self.image):
            missing = set(self.text) ^ set(self.image)
            raise DataError(f"items missing a modality: {sorted(missing)[:5]}")
        for item, mats in (("text", self.text), ("image", self.image)):
            for iid, m in mats.items():
                if m.ndim != 2 or m.shape[1] != self.d:
                    raise DataError(f"item {iid!r}: {item} matrix shape {m.shape} does not match d={self.d}")
                if not 1 <= m.shape[0] <= MAX_FEATURE_ROWS:
                    raise DataError(f"item {iid!r}: {item} row count {m.shape[0]} outside 1..{MAX_FEATURE_ROWS}")
                if not np.isfinite(m).all():
                    raise DataError(f"item {iid!r}: non-finite {item} features")

    def item_ids(self) -> list[str]:
        return sorted(self.text)

    def covers(self, ds: InteractionDataset) -> bool:
        return all(iid in self.text for iid in ds.item_ids[1:])


def write_feature_store(store: FeatureStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<III", STORE_VERSION, len(store.text), store.d))
        for iid in store.item_ids():
            raw = iid.encode("utf-8")
            t = np.ascontiguousarray(store.text[iid], dtype="<f4")
            v = np.ascontiguousarray(store.image[iid], dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", t.shape[0], v.shape[0]))
            fh.write(t.tobytes())
            fh.write(v.tobytes())


def load_feature_store(path) -> FeatureStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != STORE_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 20:
        raise DataError(f"{path}: truncated header")
    version, count, d = struct.unpack_from("<III", blob, 8)
    if version != STORE_VERSION:
        raise DataError(f"{path}: unknown version {version}")
    pos = 20
    text: dict[str, np.ndarray] = {}
    image: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(blob):
            raise DataError(f"{path}: truncated at item header")
        (id_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        iid = blob[pos:pos + id_len].decode("utf-8")
        pos += id_len
        if pos + 2 > len(blob):
            raise DataError(f"{path}: truncated in item {iid!r}")
        n_text, n_image = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if not 1 <= n_text <= MAX_FEATURE_ROWS or not 1 <= n_image <= MAX_FEATURE_ROWS:
            raise DataError(f"{path}: item {iid!r} has invalid row counts ({n_text}, {n_image})")
        need = 4 * d * (n_text + n_image)
        if pos + need > len(blob):
            raise DataError(f"{path}: truncated payload in item {iid!r}")
        t = np.frombuffer(blob, dtype="<f4", count=n_text * d, offset=pos).reshape(n_text, d)
        pos += 4 * d * n_text
        v = np.frombuffer(blob, dtype="<f4", count=n_image * d, offset=pos).reshape(n_image, d)
        pos += 4 * d * n_image
        text[iid] = t.copy()
        image[iid] = v.copy()
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    return FeatureStore(d, text, image)


def item_payload_bytes(id_len: int, d: int, n_text: int, n_image: int) -> int:
    """Byte size of one item record in the store format."""
    return 2 + id_len + 2 + 4 * d * (n_text + n_image)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def synth_clusters(n_items: int) -> np.ndarray:
    """Cluster label per item index (1-based); about 5 items per cluster."""
    n_clusters = max(2, n_items // 5)
    labels = np.zeros(n_items + 1, dtype=np.int64)
    labels[1:] = np.arange(n_items) % n_clusters
    return labels


def synth_generate(
    n_users: int,
    n_items: int,
    d: int,
    signal_strength: float,
    rng: np.random.Generator,
    min_len: int = 8,
    max_len: int = 14,
    feature_noise: float = 0.3,
) -> tuple[InteractionDataset, FeatureStore]:
    """Random-walk sequences with a planted cluster signal.

    Each step stays inside the current item's cluster with probability
    `signal_strength` and jumps uniformly over the whole catalog otherwise.
    Feature rows are the item's cluster centroid plus Gaussian noise, so
    modality features predict sequence continuation.
    """
    if n_users < 10 or n_items < 10:
        raise ConfigError("synthetic data needs n_users, n_items >= 10")
    if d < 8:
        raise ConfigError("synthetic feature dimension must be >= 8")
    if not 0.0 <= signal_strength <= 1.0:
        raise ConfigError("signal_strength must be in [0, 1]")

    labels = synth_clusters(n_items)
    n_clusters = int(labels.max()) + 1
    members = [np.flatnonzero(labels[1:] == c) + 1 for c in range(n_clusters)]

    user_ids = [f"u{k:05d}" for k in range(n_users)]
    item_ids = [""] + [f"i{k:05d}" for k in range(1, n_items + 1)]
    sequences = []
    for _ in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(1, n_items + 1))
        seq = [cur]
        for _ in range(length - 1):
            if rng.random() < signal_strength:
                cur = int(rng.choice(members[labels[cur]]))
            else:
                cur = int(rng.integers(1, n_items + 1))
            seq.append(cur)
        sequences.append(seq)
    ds = InteractionDataset(user_ids, item_ids, sequences)

    centroids_t = rng.normal(0.0, 1.0, size=(n_clusters, d))
    centroids_v = rng.normal(0.0, 1.0, size=(n_clusters, d))
    text, image = {}, {}
    for idx in range(1, n_items + 1):
        c = labels[idx]
        nt = int(rng.integers(1, 4))
        nv = int(rng.integers(1, 4))
        text[item_ids[idx]] = (centroids_t[c] + rng.normal(0.0, feature_noise, size=(nt, d))).astype(np.float32)
        image[item_ids[idx]] = (centroids_v[c] + rng.normal(0.0, feature_noise, size=(nv, d))).astype(np.float32)
    return ds, FeatureStore(d, text, image)


def store_cubes(store: FeatureStore, ds: InteractionDataset):
    """Pack the store into padded per-modality cubes aligned to dataset item
    indices: (n_items+1, R, d) plus row masks. Row 0 is the pad item."""
    if not store.covers(ds):
        missing = [iid for iid in ds.item_ids[1:] if iid not in store.text][:5]
        raise DataError(f"feature store missing items: {missing}")
    out = {}
    for name, mats in (("text", store.text), ("image", store.image)):
        rmax = max(m.shape[0] for m in mats.values())
        cube = np.zeros((ds.n_items + 1, rmax, store.d), dtype=np.float32)
        mask = np.zeros((ds.n_items + 1, rmax), dtype=bool)
        for idx in range(1, ds.n_items + 1):
            m = mats[ds.item_ids[idx]]
            cube[idx, :m.shape[0]] = m
            mask[idx, :m.shape[0]] = True
        mask[PAD, 0] = True  # keeps the pad row's softmax well-defined; output is discarded
        out[name] = (cube, mask)
    return out["text"], out["image"]
