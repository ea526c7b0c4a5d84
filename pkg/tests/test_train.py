import json
import math

import numpy as np
import pytest

from helpers import rng_for, small_run_config, tiny_model
from m3p.data import MASK, collate
from m3p.optim import Adam, inverse_sqrt_lr
from m3p.tensor import Tensor
from m3p.train import Trainer, TrainingDiverged, contrastive_loss, lambda_at, train

KEYS = {"step", "epoch", "branch", "l_m", "l_c", "l_all", "lambda", "lr", "temperature"}


@pytest.fixture
def trainer(toy_sets, toy_dir):
    def make(out, **sections):
        return Trainer(small_run_config(toy_dir, out, **sections), toy_sets[0], toy_sets[1], out)
    return make


# -- schedules ---------------------------------------------------------------------------

def test_inverse_sqrt_schedule():
    base, warm = 1e-3, 100
    assert inverse_sqrt_lr(0, base, warm) == 0.0
    assert inverse_sqrt_lr(warm, base, warm) == base
    assert inverse_sqrt_lr(50, base, warm) == pytest.approx(base / 2)
    assert inverse_sqrt_lr(400, base, warm) == pytest.approx(base / 2)
    lrs = [inverse_sqrt_lr(s, base, warm) for s in range(1, 1000)]
    peak = int(np.argmax(lrs))
    assert peak == warm - 1
    assert np.all(np.diff(lrs[:peak + 1]) > 0) and np.all(np.diff(lrs[peak:]) < 0)
    assert inverse_sqrt_lr(7, base, 0) == base


def test_lambda_ramp():
    assert lambda_at(0, 100, 1.0, 0.1) == 0.0
    assert lambda_at(5, 100, 1.0, 0.1) == pytest.approx(0.5)
    assert lambda_at(10, 100, 2.0, 0.1) == 2.0
    assert lambda_at(90, 100, 2.0, 0.1) == 2.0
    assert lambda_at(1, 100, 0.7, 0.0) == 0.7


def test_adam_single_step_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([("p", p)], lr=0.1, betas=(0.9, 0.98), eps=1e-9, warmup=0)
    p.grad = np.array([0.5, -0.25])
    lr = opt.step()
    # first step: bias-corrected moments are g and g**2, so the update is lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-8)
    assert lr == 0.1


# -- the loop ----------------------------------------------------------------------------

def test_epoch_length_and_step_cap(toy_sets, tmp_path, trainer):
    t = trainer(tmp_path)
    assert t.steps_per_epoch == math.ceil(len(toy_sets[0]) / 8)
    assert t.total_steps == 2 * t.steps_per_epoch
    capped = trainer(tmp_path, train={"max_steps": 3})
    assert len(capped.run(save=False).metrics) == 3


def test_decomposition_identity_on_every_step(toy_sets, tmp_path, trainer):
    t = trainer(tmp_path, loss={"lambda": 0.7, "lambda_ramp": 0.3})
    res = t.run(save=False)
    branches = set()
    for r in res.metrics:
        assert set(r) == KEYS
        branches.add(r["branch"])
        if r["branch"] == "image":
            assert r["l_c"] is None
            assert r["l_all"] == r["l_m"]
        else:
            assert abs(r["l_all"] - (r["l_m"] + r["lambda"] * r["l_c"])) <= 1e-9
    assert branches == {"text", "image", "fused"}
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == res.metrics


def test_lambda_zero_logs_l_all_equal_to_l_m(toy_sets, tmp_path, trainer):
    res = trainer(tmp_path, loss={"lambda": 0.0}).run(save=False)
    assert all(r["l_all"] == r["l_m"] for r in res.metrics)
    assert any(r["l_c"] is not None for r in res.metrics)


def test_zero_lr_keeps_parameters_bit_identical(toy_sets, tmp_path, trainer):
    t = trainer(tmp_path, train={"lr": 0.0})
    before = {n: p.copy() for n, p in t.model.state_dict().items()}
    t.run(epochs=1, save=False)
    for n, p in t.model.state_dict().items():
        assert p.tobytes() == before[n].tobytes(), n


def test_identical_seeds_give_identical_logs(toy_sets, tmp_path, trainer):
    a = trainer(tmp_path / "a", train={"source_mask_max": 0.5})
    b = trainer(tmp_path / "b", train={"source_mask_max": 0.5})
    a.run(save=False)
    b.run(save=False)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    c = trainer(tmp_path / "c", train={"seed": 1})
    c.run(save=False)
    assert (tmp_path / "c" / "metrics.jsonl").read_bytes() != (tmp_path / "a" / "metrics.jsonl").read_bytes()


def test_non_finite_loss_aborts_with_dump(toy_sets, tmp_path, trainer):
    t = trainer(tmp_path)
    t.model.embedding.data[...] = np.nan
    with pytest.raises(TrainingDiverged):
        t.run(save=False)
    dump = json.loads((tmp_path / "divergence.json").read_text())
    assert dump["step"] == 1 and "param_norms" in dump and dump["src"]


def test_eval_cadence_writes_checkpoints(toy_sets, tmp_path, trainer):
    t = trainer(tmp_path, train={"eval_every": 1, "eval_limit": 4})
    res = t.run()
    assert [e["epoch"] for e in res.evals] == [0, 1]
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    assert res.checkpoint == tmp_path / "last.ckpt"


def test_train_entry_point(toy_dir, tmp_path):
    cfg = small_run_config(toy_dir, tmp_path, train={"epochs": 1, "max_steps": 2})
    res = train(cfg)
    assert len(res.metrics) == 2 and res.checkpoint.exists()


def test_source_masking_keeps_tag_and_shape(toy_sets, tmp_path, trainer):
    t = trainer(tmp_path, train={"source_mask_max": 1.0})
    batch = collate(toy_sets[0].all_samples()[:8], toy_sets[0].vocab)
    masked = t._mask_sources(batch)
    assert masked.src.shape == batch.src.shape
    np.testing.assert_array_equal(masked.src[:, 0], batch.src[:, 0])
    changed = masked.src != batch.src
    assert np.all(masked.src[changed] == MASK)
    np.testing.assert_array_equal(masked.tgt, batch.tgt)


# -- the contrastive term ---------------------------------------------------------------

def test_duplicate_images_count_once(toy_sets, toy_dir):
    train_set = toy_sets[0]
    cfg = small_run_config(toy_dir, augment={"text_mask_fraction": 0.0, "patch_mask_fraction": 0.0,
                                             "image_transforms": []})
    model = tiny_model(len(train_set.vocab), train_set.all_samples()[0].image.patch_dim)
    by_key = {}
    for s in train_set.all_samples():
        by_key.setdefault(s.image_key, s)
    unique = list(by_key.values())[:4]
    dup = unique + unique[:2]
    for step in (2, 3):
        a = float(contrastive_loss(model, collate(unique, train_set.vocab), cfg, step, rng_for(0)).data)
        b = float(contrastive_loss(model, collate(dup, train_set.vocab), cfg, step, rng_for(0)).data)
        assert a == pytest.approx(b, abs=1e-12)


def test_text_text_term_changes_the_loss(toy_sets, toy_dir):
    train_set = toy_sets[0]
    off = small_run_config(toy_dir)
    on = small_run_config(toy_dir, align={"text_text": "on"})
    model = tiny_model(len(train_set.vocab), train_set.all_samples()[0].image.patch_dim)
    batch = collate(train_set.all_samples()[:6], train_set.vocab)
    a = float(contrastive_loss(model, batch, off, 3, rng_for(1)).data)
    b = float(contrastive_loss(model, batch, on, 3, rng_for(1)).data)
    assert b != a and np.isfinite(b)
