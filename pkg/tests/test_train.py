"""Training loop: artifacts, evaluation, failure modes, determinism."""

import json

import numpy as np
import pytest

from sidenet.checkpoint import save_checkpoint
from sidenet.config import load_config
from sidenet.errors import ConfigError, NumericalError
from sidenet.heads import retrieval_metrics, similarity_matrix
from sidenet.train import build_model, evaluate, evaluate_model, make_data, train
from sidenet.vit import init_vit_params

SMALL = ["data.clips_per_class=2", "optim.batch=4", "optim.epochs=1", "optim.warmup_epochs=0"]


def test_one_epoch_writes_artifacts(tmp_path):
    cfg = load_config(None, SMALL)
    result = train(cfg, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["epoch"] == 1 and rec["step"] == 2 and rec["saved_activation_bytes"] > 0
    for name in ("config.txt", "best.s4v", "last.s4v", "summary.csv"):
        assert (tmp_path / name).exists()
    assert result.best_path == tmp_path / "best.s4v"


def test_evaluate_reloads_final_metrics(tmp_path):
    cfg = load_config(None, SMALL[:-2] + ["optim.epochs=3", "optim.warmup_epochs=1"])
    result = train(cfg, out_dir=tmp_path)
    again = evaluate(tmp_path / "last.s4v", make_data(cfg), cfg)
    assert again == {k: result.metrics[-1][k] for k in again}


def test_untrained_recognition_is_near_chance():
    accs = [evaluate_model(build_model(cfg), make_data(cfg))["top1"]
            for cfg in (load_config(None, [f"seed={s}"]) for s in range(4))]
    assert abs(np.mean(accs) - 25.0) <= 10.0


def test_zero_up_retrieval_matches_frozen_backbone():
    cfg = load_config(None, ["task=retrieval"])
    model, data = build_model(cfg), make_data(cfg)
    frozen = model.frozen_video_embeddings(data.videos)
    want = retrieval_metrics(similarity_matrix(frozen, model.text_embeddings(data.tokens)).data)
    assert evaluate_model(model, data) == want


def test_backbone_untouched_by_training():
    result = train(load_config(None, SMALL))
    assert result.backbone_checksum_before == result.backbone_checksum_after


def test_non_finite_backbone_names_tensor(tmp_path):
    cfg = load_config(None, SMALL)
    store = init_vit_params(cfg.vit, np.random.default_rng(0), np.float32)
    store["vit.blocks.0.mlp.fc1.weight"].data[0, 0] = np.nan
    save_checkpoint(store.state_dict(), tmp_path / "vit.s4v")
    cfg = load_config(None, SMALL + [f"vit_checkpoint={tmp_path / 'vit.s4v'}"])
    with pytest.raises(NumericalError, match="vit.blocks.0.mlp.fc1.weight"):
        train(cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_huge_learning_rate_raises_numerical_error():
    cfg = load_config(None, SMALL[:-2] + ["optim.epochs=20", "optim.warmup_epochs=0", "optim.lr=1e30"])
    with pytest.raises(NumericalError):
        train(cfg)


def test_retrieval_without_tokens_rejected():
    cfg = load_config(None, ["task=retrieval"])
    with pytest.raises(ConfigError):
        train(cfg, data=make_data(load_config(None, [])))


def test_same_seed_byte_identical_metrics(tmp_path):
    cfg = load_config(None, SMALL[:-2] + ["optim.epochs=2", "optim.warmup_epochs=1"])
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "last.s4v").read_bytes() == (tmp_path / "b" / "last.s4v").read_bytes()


def test_loss_decreases_over_a_short_run():
    cfg = load_config(None, ["data.clips_per_class=4", "optim.batch=8", "optim.epochs=10", "optim.warmup_epochs=1"])
    losses = [m["loss"] for m in train(cfg).metrics]
    assert losses[-1] < losses[0]
