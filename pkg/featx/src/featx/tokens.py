"""Image-to-token retrieval against a word dictionary."""

from __future__ import annotations

import warnings

import numpy as np

from .records import FALLBACK_TOKEN


class TokenDictionary:
    """Word list with unit-normalized embeddings in the image-text space."""

    def __init__(self, words: list[str], embeddings: np.ndarray):
        if len(words) == 0:
            raise ValueError("token dictionary must not be empty")
        if embeddings.shape[0] != len(words):
            raise ValueError("one embedding row per word required")
        self.words = list(words)
        norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        self.embeddings = embeddings / np.maximum(norms, 1e-12)

    @classmethod
    def from_words(cls, words: list[str], scorer) -> "TokenDictionary":
        return cls(words, np.asarray(scorer.embed_words(words), dtype=np.float64))

    @classmethod
    def from_file(cls, path, scorer) -> "TokenDictionary":
        words = [w.strip() for w in open(path, encoding="utf-8") if w.strip()]
        return cls.from_words(words, scorer)

    def __len__(self):
        return len(self.words)


def image_to_tokens(image_path, dictionary: TokenDictionary, n: int, scorer) -> list[str]:
    """The n dictionary words most cosine-similar to the image, highest
    first, ties broken alphabetically. Unreadable images degrade to the
    fallback token with a warning."""
    if n < 1:
        raise ValueError("n must be >= 1")
    try:
        img = np.asarray(scorer.embed_image(image_path), dtype=np.float64)
    except OSError as exc:
        warnings.warn(f"unreadable image {image_path}: {exc}; substituting {FALLBACK_TOKEN!r}")
        return [FALLBACK_TOKEN]
    img = img / max(np.linalg.norm(img), 1e-12)
    scores = dictionary.embeddings @ img
    order = sorted(range(len(dictionary)), key=lambda i: (-scores[i], dictionary.words[i]))
    return [dictionary.words[i] for i in order[:n]]
