import json

import pytest

from featx import ManifestError, RawItemRecord, load_manifest


def write_manifest(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")


def test_load_manifest_basic(tmp_path):
    p = tmp_path / "items.json"
    write_manifest(p, [
        {"item_id": "a", "sentences": ["hello", "world"], "image_paths": ["a.png"]},
        {"item_id": "b", "sentences": ["x"]},
    ])
    records = load_manifest(p)
    assert [r.item_id for r in records] == ["a", "b"]
    assert records[0].sentences == ["hello", "world"]
    assert records[1].image_paths == []


def test_manifest_rejects_bad_json(tmp_path):
    p = tmp_path / "items.json"
    p.write_text('{"item_id": "a"}\nnot json\n')
    with pytest.raises(ManifestError, match=":2"):
        load_manifest(p)


def test_manifest_rejects_duplicates(tmp_path):
    p = tmp_path / "items.json"
    write_manifest(p, [{"item_id": "a", "sentences": ["x"]}, {"item_id": "a", "sentences": ["y"]}])
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(p)


def test_manifest_rejects_empty(tmp_path):
    p = tmp_path / "items.json"
    p.write_text("\n")
    with pytest.raises(ManifestError):
        load_manifest(p)


def test_normalized_caps_at_ten():
    rec = RawItemRecord("x", [f"s{i}" for i in range(14)], [f"i{i}.png" for i in range(12)])
    out = rec.normalized()
    assert len(out.sentences) == 10 and len(out.image_paths) == 10


def test_normalized_fallbacks():
    out = RawItemRecord("x", []).normalized()
    assert out.sentences == ["unknown"]
    out = RawItemRecord("x", ["  ", "ok"]).normalized()
    assert out.sentences == ["unknown", "ok"]
