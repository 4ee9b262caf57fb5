import hashlib
import json
import shutil

import pytest
import yaml

from samestage.cli import main, parse_overrides
from samestage.config import resolve
from samestage.data import list_images


def write_config(path, root, **extra):
    cfg = {
        "data": {"root": str(root), "image_size": 32},
        "epochs": 1, "checkpoint_every": 0, "disc_width": 8,
        "generator": {"base_width": 8}, "heads": {"latent_dim": 16}, "dag": {"n_patches": 16},
    }
    cfg.update(extra)
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_root):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp / "toy.yaml", toy_root)
    code = main(["train", "--config", str(cfg), "--epochs", "2", "--seed", "7", "--out", str(tmp / "run")])
    assert code == 0
    return tmp, cfg


def _hash_dir(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in list_images(folder)}


def test_train_writes_self_describing_run(trained):
    tmp, _ = trained
    run = tmp / "run"
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 6  # 6 training images per domain, 2 epochs
    stored = json.loads((run / "config.json").read_text())
    assert stored["train"]["seed"] == 7 and stored["train"]["epochs"] == 2
    meta = json.loads((run / "run.json").read_text())
    assert meta["seed"] == 7 and "package_version" in meta and "torch" in meta
    assert (run / "final.pt").is_file()


def test_missing_dataset_exit_3(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "r")]) == 3
    assert str(missing) in capsys.readouterr().err


def test_bad_override_exit_2(tmp_path, toy_root, capsys):
    assert main(["train", "--data", str(toy_root), "--out", str(tmp_path / "r"), "--dag.beta", "3"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["train", "--data", str(toy_root), "--nonsense.key", "1"]) == 2


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["evaluate", "--real", "a", "--fake", "b", "--bogus"])
    assert info.value.code == 2


def test_uniform_ablation_flags():
    over = parse_overrides(["--dag.k", "1", "--dag.beta", "0"])
    dag = resolve({}, over).train.dag
    assert dag.oversampling_ratio == 1 and dag.importance_ratio == 0.0 and not dag.uses_scores


def test_uniform_ablation_run(tmp_path, toy_root):
    cfg = write_config(tmp_path / "c.yaml", toy_root)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "u"), "--dag.k", "1", "--dag.beta", "0"]) == 0
    recs = [json.loads(l) for l in (tmp_path / "u" / "sampling.jsonl").read_text().splitlines()]
    assert recs and all(r["importance_count"] == 0 for r in recs)


def test_output_root_env(tmp_path, toy_root, monkeypatch):
    monkeypatch.setenv("SAMESTAGE_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = write_config(tmp_path / "c.yaml", toy_root)
    assert main(["train", "--config", str(cfg), "--out", "rel"]) == 0
    assert (tmp_path / "root" / "rel" / "final.pt").is_file()


def test_translate_and_determinism(trained, toy_root, tmp_path):
    run, cfg = trained
    ckpt = str(run / "run" / "final.pt")
    src = tmp_path / "five"
    src.mkdir()
    for p in list_images(toy_root / "testA")[:4] + list_images(toy_root / "trainA")[:1]:
        shutil.copy(p, src / f"{p.parent.name}_{p.name}")
    assert main(["translate", "--checkpoint", ckpt, "--input", str(src), "--output", str(tmp_path / "o1")]) == 0
    assert main(["translate", "--checkpoint", ckpt, "--input", str(src), "--output", str(tmp_path / "o2"),
                 "--config", str(cfg)]) == 0
    h1, h2 = _hash_dir(tmp_path / "o1"), _hash_dir(tmp_path / "o2")
    assert sorted(h1) == sorted(p.name for p in list_images(src)) and len(h1) == 5
    assert h1 == h2


def test_translate_errors(trained, tmp_path):
    run, _ = trained
    ckpt = str(run / "run" / "final.pt")
    (tmp_path / "empty").mkdir()
    assert main(["translate", "--checkpoint", ckpt, "--input", str(tmp_path / "empty"), "--output", str(tmp_path / "o")]) == 3
    other = write_config(tmp_path / "other.yaml", "x", generator={"base_width": 16})
    assert main(["translate", "--checkpoint", ckpt, "--input", str(tmp_path / "empty"),
                 "--output", str(tmp_path / "o"), "--config", str(other)]) == 2
    assert main(["translate", "--checkpoint", str(tmp_path / "none.pt"), "--input", "x", "--output", "y"]) == 3


def test_evaluate(toy_root, tmp_path, capsys):
    a = str(toy_root / "testA")
    assert main(["evaluate", "--real", a, "--fake", a, "--json", str(tmp_path / "f.json")]) == 0
    res = json.loads((tmp_path / "f.json").read_text())
    assert res["fid"] == pytest.approx(0.0, abs=1e-6)
    assert main(["evaluate", "--real", a, "--fake", str(toy_root / "trainB")]) == 0  # 4 vs 6 images
    assert "FID" in capsys.readouterr().out
    assert main(["evaluate", "--real", a, "--fake", a, "--extractor", f"inception:{tmp_path / 'w.pth'}"]) == 3


def test_synth_inspect_and_weight_density(trained, tmp_path):
    run, _ = trained
    assert main(["synth-toy", "--out", str(tmp_path / "toy"), "--n-images", "4"]) == 0
    assert len(list_images(tmp_path / "toy" / "trainA")) == 4
    assert main(["inspect-sampling", "--history", str(run / "run" / "sampling.jsonl"), "--tap", "24",
                 "--out", str(tmp_path / "heat.png")]) == 0
    assert (tmp_path / "heat.png").is_file()
    assert main(["inspect-sampling", "--history", str(run / "run" / "sampling.jsonl"), "--tap", "3",
                 "--out", str(tmp_path / "h2.png")]) == 3
    assert main(["weight-density", "--checkpoint", str(run / "run" / "final.pt"), "--component",
                 "heads.projections", "--out", str(tmp_path / "wd")]) == 0
    assert (tmp_path / "wd.csv").is_file()
    assert main(["weight-density", "--checkpoint", str(run / "run" / "final.pt"), "--component",
                 "critic", "--out", str(tmp_path / "wd")]) == 2
