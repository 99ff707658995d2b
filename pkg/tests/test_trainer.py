import json
import math

import numpy as np
import pytest

from grbe import metrics, spmotif, trainer
from grbe.autodiff import Tensor
from grbe.trainer import CheckpointError, TrainConfig

from conftest import base_marked, oracle_params


def test_cross_entropy_floor_and_uniform():
    logits = Tensor(np.array([[50.0, -50.0, -50.0], [-50.0, -50.0, 50.0]]))
    assert trainer.cross_entropy(logits, [0, 2]).item() == pytest.approx(0.0, abs=1e-12)
    assert trainer.cross_entropy(Tensor(np.zeros((4, 3))), [0, 1, 2, 0]).item() == pytest.approx(math.log(3))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(r_s=1.5)
    with pytest.raises(ValueError):
        TrainConfig(r_add=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"alpha": 1, "bogus": 2})
    cfg = TrainConfig(alpha=0.3, temperature_final=0.2)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_temperature_schedule():
    cfg = TrainConfig(epochs=5, temperature=1.0, temperature_final=0.2)
    assert cfg.temperature_at(0) == 1.0
    assert cfg.temperature_at(4) == pytest.approx(0.2)
    assert TrainConfig().temperature_at(3) == 1.0


def test_zero_weights_total_is_rationale_loss(small_corpus):
    graphs, _ = small_corpus
    cfg = TrainConfig(alpha=0, beta=0, gamma=0, hidden=8, layers=2)
    _, params = trainer.init_model(cfg, 4, 3)
    bundle = trainer.compute_losses(graphs[:6], params, cfg, np.random.default_rng(0))
    assert bundle.total.item() == bundle.L_r
    assert math.isnan(bundle.L_a) and math.isnan(bundle.L_c) and math.isnan(bundle.L_s)


def test_full_objective_terms_present(small_corpus):
    graphs, _ = small_corpus
    cfg = TrainConfig(hidden=8, layers=2, r_aug=0.5)
    _, params = trainer.init_model(cfg, 4, 3)
    b = trainer.compute_losses(graphs[:8], params, cfg, np.random.default_rng(0))
    assert all(np.isfinite([b.L_r, b.L_a, b.L_c, b.L_s]))
    expect = b.L_r + cfg.alpha * b.L_a + cfg.beta * b.L_c + cfg.gamma * b.L_s
    assert b.total.item() == pytest.approx(expect, rel=1e-12)
    assert all(a.label == graphs[a.provenance["i"]].label for a in b.augmented)


def test_full_objective_gradient_check(small_corpus):
    graphs, _ = small_corpus
    cfg = TrainConfig(hidden=8, layers=2, r_aug=0.5)
    worst, per = trainer.gradient_check(graphs[:2], cfg, seed=0, max_coords=10)
    assert worst < 1e-4
    assert set(per) == set(trainer.init_model(cfg, 4, 3)[1])


def test_short_training_bookkeeping(small_corpus):
    graphs, _ = small_corpus
    train = graphs[:20]
    cfg = TrainConfig(epochs=2, batch_size=8, hidden=8, layers=2)
    _, params, hist = trainer.train(train, cfg, graphs[40:50])
    assert len(hist) == 2
    for row in hist:
        assert set(trainer.HISTORY_COLUMNS) <= set(row)
        assert all(np.isfinite(row[k]) for k in ("L_r", "L_c", "L_s", "total", "train_acc", "val_acc"))
    _, again, _ = trainer.train(train, cfg, graphs[40:50])
    for k in params:
        np.testing.assert_array_equal(params[k].data, again[k].data)


def test_erm_training_runs(small_corpus):
    graphs, _ = small_corpus
    cfg = TrainConfig(epochs=1, batch_size=8, hidden=8, layers=2, erm=True)
    _, params, hist = trainer.train(graphs[:20], cfg)
    assert math.isnan(hist[0]["L_c"]) and np.isfinite(hist[0]["L_r"])
    assert trainer.evaluate(params, graphs[40:], cfg).accuracy >= 0.0


def test_training_reduces_rationale_loss():
    graphs, _ = spmotif.generate_spmotif(spmotif.SpmotifConfig(n_train=300, n_val=0, n_test=0, seed=2))
    cfg = TrainConfig(epochs=6, hidden=16, layers=2, learning_rate=3e-3)
    _, _, hist = trainer.train(graphs, cfg)
    assert hist[-1]["L_r"] < hist[0]["L_r"]


def test_inference_is_deterministic(small_corpus):
    graphs, _ = small_corpus
    cfg = TrainConfig(hidden=8, layers=2)
    _, params = trainer.init_model(cfg, 4, 3)
    a = trainer.infer(params, graphs[0], cfg)
    b = trainer.infer(params, graphs[0], cfg)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])
    assert len(a[1]) == graphs[0].num_edges


def test_oracle_parameters_select_the_motif(small_corpus):
    graphs, _ = small_corpus
    marked = [base_marked(g) for g in graphs]
    _, params = oracle_params()
    cfg = TrainConfig(hidden=4, layers=1)
    for g in marked:
        _, mask, split, fallback = trainer.infer(params, g, cfg)
        assert not fallback
        np.testing.assert_array_equal(split.hard_indicator, g.gt_rationale)
    report = trainer.evaluate(params, marked, cfg)
    assert report.rationale_auc == 1.0


def test_checkpoint_roundtrip(tmp_path):
    cfg = TrainConfig(hidden=8, layers=2)
    arch, params = trainer.init_model(cfg, 4, 3)
    path = tmp_path / "ck.json"
    trainer.save_checkpoint(path, arch, params, cfg)
    arch2, params2, cfg2 = trainer.load_checkpoint(path)
    assert arch2 == arch and cfg2 == cfg
    for k in params:
        np.testing.assert_array_equal(params[k].data, params2[k].data)
    assert not (tmp_path / "ck.json.partial").exists()


def test_checkpoint_errors(tmp_path):
    cfg = TrainConfig(hidden=8, layers=2)
    arch, params = trainer.init_model(cfg, 4, 3)
    path = tmp_path / "ck.json"
    trainer.save_checkpoint(path, arch, params, cfg)
    payload = json.loads(path.read_text())
    payload["params"]["cls.1.W"]["shape"] = [8, 4]
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(path)
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(path)


def test_history_roundtrip(tmp_path):
    rows = [{"epoch": 0, "L_r": 1.0, "L_a": float("nan"), "total": 2.0}]
    path = tmp_path / "h.csv"
    trainer.write_history(path, rows)
    assert path.read_text().splitlines()[0] == ",".join(trainer.HISTORY_COLUMNS)
    back = trainer.read_history(path)
    assert back[0]["epoch"] == 0 and back[0]["L_r"] == 1.0 and math.isnan(back[0]["L_a"])
