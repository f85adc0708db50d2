"""Composition: manifest records -> sentence and image-token embeddings ->
feature-store file."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .embedders import SENTENCE_DIM
from .records import FALLBACK_TOKEN, RawItemRecord
from .store import StoreFormatError, write_store
from .tokens import TokenDictionary, image_to_tokens


def item_features(
    record: RawItemRecord,
    dictionary: TokenDictionary,
    n_tokens: int,
    embedder,
    scorer,
    image_root=None,
) -> tuple[np.ndarray, np.ndarray]:
    """(text matrix, image matrix) for one item.

    Text rows embed the item's sentences. Each image contributes one row:
    its top-n dictionary tokens joined into a sentence (highest score
    first, single spaces) and embedded with the same sentence model.
    Items without images get one fallback-token row so both modalities are
    always non-empty.
    """
    rec = record.normalized()
    text = np.asarray(embedder.encode(rec.sentences), dtype=np.float32)

    sentences = []
    for rel in rec.image_paths:
        path = Path(image_root) / rel if image_root is not None else Path(rel)
        tokens = image_to_tokens(path, dictionary, n_tokens, scorer)
        sentences.append(" ".join(tokens))
    if not sentences:
        sentences = [FALLBACK_TOKEN]
    image = np.asarray(embedder.encode(sentences), dtype=np.float32)

    if text.shape[0] == 0 or image.shape[0] == 0:
        raise StoreFormatError(f"item {rec.item_id!r} ended with an empty modality")
    return text, image


def build_feature_store(
    records: list[RawItemRecord],
    dictionary: TokenDictionary,
    n_tokens: int,
    out_path,
    embedder,
    scorer,
    image_root=None,
) -> int:
    """Extract every record and write the store; returns the byte size."""
    text, image = {}, {}
    for rec in records:
        t, v = item_features(rec, dictionary, n_tokens, embedder, scorer, image_root)
        if t.shape[1] != SENTENCE_DIM or v.shape[1] != SENTENCE_DIM:
            raise StoreFormatError(
                f"item {rec.item_id!r}: embedding dimension {t.shape[1]} != {SENTENCE_DIM}"
            )
        text[rec.item_id] = t
        image[rec.item_id] = v
    return write_store(out_path, SENTENCE_DIM, text, image)
