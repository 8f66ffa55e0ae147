import json

from hcmt.experiments import ablation_run, dataset_fingerprint, training_sanity
from hcmt.model import ModelConfig

TINY = ModelConfig(hidden=8, heads=2, l_c=1, l_h=3, lam=1, train_steps=4, log_every=2, checkpoint_every=2)


def test_fingerprint_tracks_bytes(tmp_path, small_dataset):
    root = small_dataset.root
    before = dataset_fingerprint(root)
    assert before == dataset_fingerprint(root) and len(before) == 64
    copy = tmp_path / "copy"
    copy.mkdir()
    for f in root.iterdir():
        (copy / f.name).write_bytes(f.read_bytes())
    assert dataset_fingerprint(copy) == before
    (copy / "meta.json").write_bytes((copy / "meta.json").read_bytes() + b" ")
    assert dataset_fingerprint(copy) != before


def test_training_sanity_writes_result(tmp_path, small_dataset):
    result = training_sanity(small_dataset.root, tmp_path, TINY)
    saved = json.loads((tmp_path / "result.json").read_text())
    assert saved["config"] == TINY.to_dict()
    assert saved["dataset_sha256"] == dataset_fingerprint(small_dataset.root)
    assert len(saved["first_losses"]) == 4
    for key in ("trained", "initial", "baseline"):
        assert saved[key]["position_rmse_all"] >= 0
    assert result["train_seconds"] <= result["total_seconds"]
    assert (tmp_path / "model.ckpt").is_file()


def test_ablation_table(tmp_path, small_dataset):
    result = ablation_run(small_dataset.root, tmp_path, TINY, seeds=(0,))
    assert set(result["rmse_all"]["0"]) == {"full", "only_cmt", "only_hmt"}
    assert json.loads((tmp_path / "ablation.json").read_text()) == result
