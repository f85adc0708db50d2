"""Offline multimodal feature extraction.

Turns item manifests (sentences + images) into the binary feature-store
format the recommendation pipeline consumes: sentences embedded directly,
images first described by their most similar dictionary tokens and the
joined token sentence embedded with the same sentence model.
"""

from .embedders import (
    SENTENCE_DIM,
    HashedImageTextScorer,
    HashedSentenceEmbedder,
    make_backend,
)
from .extract import build_feature_store, item_features
from .records import FALLBACK_TOKEN, ManifestError, RawItemRecord, load_manifest
from .store import StoreFormatError, item_payload_bytes, write_store
from .tokens import TokenDictionary, image_to_tokens

__version__ = "0.1.0"

__all__ = [
    "FALLBACK_TOKEN", "HashedImageTextScorer", "HashedSentenceEmbedder",
    "ManifestError", "RawItemRecord", "SENTENCE_DIM", "StoreFormatError",
    "TokenDictionary", "build_feature_store", "image_to_tokens",
    "item_features", "item_payload_bytes", "load_manifest", "make_backend",
    "write_store",
]
