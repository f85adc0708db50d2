import json

import numpy as np
import pytest

from mp4sr import data as D
from mp4sr.cli import main
from mp4sr.kernel import make_rng


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthetic dataset files plus a small run config."""
    root = tmp_path_factory.mktemp("cli")
    ds, store = D.synth_generate(30, 15, 8, 0.9, make_rng(0))
    D.write_interactions(ds, root / "interactions.tsv")
    D.write_feature_store(store, root / "features.bin")
    cfg = {
        "interactions": str(root / "interactions.tsv"),
        "feature_store": str(root / "features.bin"),
        "seed": 1, "epochs": 2, "batch_size": 32,
        "d_a": 8, "d_0": 8, "n_experts": 2, "n_layers": 1, "n_heads": 2,
    }
    (root / "run.json").write_text(json.dumps(cfg))
    return root


def test_preprocess_manifest_matches_oracle(workdir, tmp_path):
    out = tmp_path / "pre"
    assert main(["preprocess", str(workdir / "interactions.tsv"), "--k", "2", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    oracle = D.kcore_filter(D.load_interactions(workdir / "interactions.tsv"), 2)
    assert manifest["n_users"] == oracle.n_users
    assert manifest["n_items"] == oracle.n_items
    assert manifest["n_interactions"] == oracle.n_interactions


def test_preprocess_rerun_is_byte_identical(workdir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["preprocess", str(workdir / "interactions.tsv"), "--k", "2", "--out", str(a)])
    main(["preprocess", str(workdir / "interactions.tsv"), "--k", "2", "--out", str(b)])
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (a / "filtered.tsv").read_bytes() == (b / "filtered.tsv").read_bytes()


def test_preprocess_missing_file_names_path(tmp_path, capsys):
    code = main(["preprocess", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "nope.tsv" in capsys.readouterr().err


def test_synth_round_trip_and_determinism(tmp_path):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"n_users": 20, "n_items": 12, "d": 8, "signal_strength": 0.9, "seed": 7}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["synth", "--config", str(cfg), "--out", str(b)]) == 0
    assert (a / "interactions.tsv").read_bytes() == (b / "interactions.tsv").read_bytes()
    assert (a / "features.bin").read_bytes() == (b / "features.bin").read_bytes()
    ds = D.load_interactions(a / "interactions.tsv")
    store = D.load_feature_store(a / "features.bin")
    assert ds.n_users == 20 and store.d == 8


def test_synth_planted_signal_frequency(tmp_path):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"n_users": 200, "n_items": 50, "d": 8, "signal_strength": 0.9, "seed": 3}))
    out = tmp_path / "s"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    ds = D.load_interactions(out / "interactions.tsv")
    labels = D.synth_clusters(50)
    id_label = {f"i{k:05d}": labels[k] for k in range(1, 51)}
    stay = total = 0
    for seq in ds.sequences:
        names = [ds.item_ids[i] for i in seq]
        for x, y in zip(names, names[1:]):
            total += 1
            stay += id_label[x] == id_label[y]
    assert abs(stay / total - 0.9) < 0.03


def test_synth_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"n_users": 20, "n_items": 12, "d": 8, "signal_strength": 0.9, "bogus": 1}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2


def test_pretrain_then_finetune_with_init(workdir, tmp_path):
    pre_out = tmp_path / "pre"
    assert main(["pretrain", "--config", str(workdir / "run.json"), "--out", str(pre_out)]) == 0
    ckpt = pre_out / "checkpoints" / "pretrain.ckpt"
    assert ckpt.exists() and (pre_out / "logs" / "pretrain_log.csv").exists()
    assert (pre_out / "config.json").exists()

    ft_out = tmp_path / "ft"
    assert main(["finetune", "--config", str(workdir / "run.json"), "--out", str(ft_out),
                 "--init", str(ckpt)]) == 0
    assert (ft_out / "checkpoints" / "model.ckpt").exists()
    assert (ft_out / "logs" / "finetune_log.csv").exists()
    assert (ft_out / "reports" / "metrics_test.csv").exists()


def test_finetune_without_init_is_from_scratch(workdir, tmp_path):
    out = tmp_path / "scratch"
    assert main(["finetune", "--config", str(workdir / "run.json"), "--out", str(out)]) == 0
    assert (out / "checkpoints" / "model.ckpt").exists()


def test_evaluate_twice_identical_csvs(workdir, tmp_path):
    ft_out = tmp_path / "ft"
    main(["finetune", "--config", str(workdir / "run.json"), "--out", str(ft_out)])
    model = ft_out / "checkpoints" / "model.ckpt"
    a, b = tmp_path / "e1", tmp_path / "e2"
    assert main(["evaluate", "--config", str(workdir / "run.json"), "--out", str(a),
                 "--init", str(model)]) == 0
    assert main(["evaluate", "--config", str(workdir / "run.json"), "--out", str(b),
                 "--init", str(model)]) == 0
    for mode in ("valid", "test"):
        assert (a / "reports" / f"metrics_{mode}.csv").read_bytes() == \
               (b / "reports" / f"metrics_{mode}.csv").read_bytes()


def test_evaluate_requires_init(workdir, tmp_path):
    assert main(["evaluate", "--config", str(workdir / "run.json"),
                 "--out", str(tmp_path / "e")]) == 2


def test_contradictory_variants_exit_2(workdir, tmp_path, capsys):
    code = main(["finetune", "--config", str(workdir / "run.json"), "--out", str(tmp_path / "x"),
                 "--variant", "e2e", "--variant", "no-pretrain"])
    assert code == 2
    code = main(["pretrain", "--config", str(workdir / "run.json"), "--out", str(tmp_path / "y"),
                 "--variant", "no-nip", "--variant", "no-cmcl"])
    assert code == 2


def test_unknown_config_key_exit_2(workdir, tmp_path):
    bad = tmp_path / "bad.json"
    cfg = json.loads((workdir / "run.json").read_text())
    cfg["learning_rat"] = 0.1
    bad.write_text(json.dumps(cfg))
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_ablate_emits_eight_rows(workdir, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(workdir / "run.json"), "--out", str(out),
                 "--pretrain-epochs", "1"]) == 0
    lines = (out / "reports" / "ablation.csv").read_text().strip().splitlines()
    assert len(lines) == 9  # header + 8 variants
    names = [ln.split(",")[0] for ln in lines[1:]]
    assert names[0] == "full"
    assert {"no-nip", "no-cmcl", "no-cmixup", "no-pretrain", "no-proj", "e2e", "shared-encoders"} == set(names[1:])


def test_report_renders_csv(workdir, tmp_path, capsys):
    out = tmp_path / "ft"
    main(["finetune", "--config", str(workdir / "run.json"), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out / "reports" / "metrics_test.csv")]) == 0
    printed = capsys.readouterr().out
    assert "overall" in printed and "scope" in printed


def test_report_missing_file_exit_2(tmp_path):
    assert main(["report", str(tmp_path / "none.csv")]) == 2
