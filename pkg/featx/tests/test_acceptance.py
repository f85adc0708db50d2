"""Acceptance criteria for the feature-extraction package.

Format conformance uses the consumer package's loader, which must be
installed alongside (pip install -e ../ from featx/, or both editable)."""

import numpy as np
import pytest

from featx import (
    HashedImageTextScorer,
    HashedSentenceEmbedder,
    RawItemRecord,
    TokenDictionary,
    build_feature_store,
    image_to_tokens,
    item_features,
)


def test_format_conformance_primary_loader_bit_exact(tmp_path):
    """20-item toy corpus, d=768: the written store loads through the
    consumer's loader with bit-identical matrices."""
    mp4sr_data = pytest.importorskip("mp4sr.data", reason="consumer package not installed")
    embedder, scorer = HashedSentenceEmbedder(), HashedImageTextScorer()
    dictionary = TokenDictionary.from_words([f"w{i:02d}" for i in range(40)], scorer)
    rng = np.random.Generator(np.random.Philox(0))
    records = []
    for i in range(20):
        n_img = int(rng.integers(0, 3))
        paths = []
        for j in range(n_img):
            p = tmp_path / f"img_{i}_{j}.png"
            p.write_bytes(rng.bytes(64))
            paths.append(p.name)
        records.append(RawItemRecord(
            f"item{i:03d}",
            [f"sentence {i} {k}" for k in range(int(rng.integers(1, 4)))],
            paths,
        ))
    out = tmp_path / "store.bin"
    build_feature_store(records, dictionary, 15, out, embedder, scorer, image_root=tmp_path)

    store = mp4sr_data.load_feature_store(out)
    assert store.d == 768
    assert len(store.text) == 20
    for rec in records:
        t, v = item_features(rec, dictionary, 15, embedder, scorer, image_root=tmp_path)
        assert (store.text[rec.item_id] == t).all()
        assert (store.image[rec.item_id] == v).all()


@pytest.mark.parametrize("n", [1, 5, 15, "all"])
def test_topn_equals_exhaustive_cosine_sort(n):
    """Mocked embeddings: selection must equal the brute-force cosine sort."""
    scorer = HashedImageTextScorer()
    words = [f"word{i:03d}" for i in range(25)]
    dictionary = TokenDictionary.from_words(words, scorer)
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        img = Path(tmp) / "img.png"
        img.write_bytes(b"pixels" * 11)
        k = len(words) if n == "all" else n
        got = image_to_tokens(img, dictionary, k, scorer)

        vec = scorer.embed_image(img)
        vec = vec / np.linalg.norm(vec)
        scores = {}
        for w in words:
            e = scorer.embed_words([w])[0]
            scores[w] = float(e @ vec / np.linalg.norm(e))
        oracle = sorted(words, key=lambda w: (-scores[w], w))[:k]
        assert got == oracle
