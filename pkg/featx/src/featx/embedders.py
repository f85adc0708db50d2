"""Thin interfaces around the pretrained models, so everything else (and
every test) can run against lightweight substitutes.

Real backends load lazily on first use and need the one-time
`featx fetch-models` step for network access. The hashed backend derives
deterministic pseudo-embeddings from content hashes; it exercises the full
pipeline offline but carries no semantics.
"""

from __future__ import annotations

import hashlib
from typing import Protocol

import numpy as np

SENTENCE_DIM = 768
SBERT_MODEL = "sentence-transformers/all-mpnet-base-v2"
CLIP_MODEL = "openai/clip-vit-base-patch32"


class SentenceEmbedder(Protocol):
    def encode(self, texts: list[str]) -> np.ndarray:
        """(len(texts), 768) float32, row order matching the input."""
        ...


class ImageTextScorer(Protocol):
    def embed_image(self, path) -> np.ndarray:
        """1-D image embedding; raises OSError on unreadable files."""
        ...

    def embed_words(self, words: list[str]) -> np.ndarray:
        """(len(words), k) word embeddings in the image space."""
        ...


def _hash_vector(key: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    return np.random.Generator(np.random.Philox(seed)).standard_normal(dim).astype(np.float32)


class HashedSentenceEmbedder:
    """Deterministic stand-in: one pseudo-random unit vector per distinct text."""

    def encode(self, texts):
        rows = np.stack([_hash_vector("sent:" + t, SENTENCE_DIM) for t in texts])
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class HashedImageTextScorer:
    dim = 64

    def embed_image(self, path):
        with open(path, "rb") as fh:  # unreadable files raise OSError here
            digest = hashlib.sha256(fh.read()).hexdigest()
        return _hash_vector("img:" + digest, self.dim)

    def embed_words(self, words):
        return np.stack([_hash_vector("word:" + w, self.dim) for w in words])


class SbertSentenceEmbedder:
    """Sentence-BERT backend (768-dimensional)."""

    def __init__(self, model_name: str = SBERT_MODEL):
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model_name)

    def encode(self, texts):
        out = self._model.encode(texts, convert_to_numpy=True, show_progress_bar=False)
        return np.asarray(out, dtype=np.float32).reshape(len(texts), -1)


class ClipImageTextScorer:
    """CLIP backend for scoring dictionary words against an image."""

    def __init__(self, model_name: str = CLIP_MODEL):
        import torch  # noqa: F401  (transformers needs it at runtime)
        from transformers import CLIPModel, CLIPProcessor

        self._model = CLIPModel.from_pretrained(model_name)
        self._processor = CLIPProcessor.from_pretrained(model_name)

    def embed_image(self, path):
        import torch
        from PIL import Image

        image = Image.open(path).convert("RGB")
        inputs = self._processor(images=image, return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return feats[0].cpu().numpy().astype(np.float32)

    def embed_words(self, words):
        import torch

        inputs = self._processor(text=words, return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)


def make_backend(name: str):
    """-> (SentenceEmbedder, ImageTextScorer) pair for a backend name."""
    if name == "hashed":
        return HashedSentenceEmbedder(), HashedImageTextScorer()
    if name == "models":
        return SbertSentenceEmbedder(), ClipImageTextScorer()
    raise ValueError(f"unknown backend {name!r}; expected 'models' or 'hashed'")


def fetch_models() -> None:
    """Download the pretrained weights (the only step that touches the
    network)."""
    SbertSentenceEmbedder()
    ClipImageTextScorer()
