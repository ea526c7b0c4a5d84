"""End-to-end acceptance checks.

Every test records one PASS/FAIL line, printed together at the end of the
session. The two desk-scale training runs (contrastive weight 1 and 0) are
session fixtures shared by the overfit, alignment and masking checks.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import check, coordinate_check, directional_check, leaf, readout, rng_for, small_run_config
from m3p import tensor as T
from m3p.alignment import ContrastiveBatch, info_nce
from m3p.config import RunConfig
from m3p.data import (SamplerConfig, collate, draw_corpora, epoch_temperature, patchify, sampling_probs,
                      unpatchify)
from m3p.encoders import EncoderStates
from m3p.evaluate import evaluate_bleu, masked_source_eval, parallel_cosine
from m3p.fusion import BRANCHES, CVLM, BranchSchedule, pick_branch
from m3p.layers import DecoderLayer, causal_bias
from m3p.model import ablate_vision
from m3p.tensor import Tensor
from m3p.toydata import generate_toy_corpus, load_toy_splits
from m3p.train import Trainer, load_model

OVERFIT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "overfit.toml"
RUN_BUDGET_S = 600.0


# -- 1: gradients --------------------------------------------------------------------------

def _op_checks(seed):
    rng = rng_for(seed)
    probe = rng_for(10_000 + seed)
    errs = {}

    a, b = leaf(rng, (3, 4)), leaf(rng, (4, 2))
    errs["matmul"] = coordinate_check(lambda: readout(a @ b, rng_for(seed)), [a, b])

    x = leaf(rng, (3, 5))
    errs["softmax"] = coordinate_check(lambda: readout(T.softmax(x, axis=-1), rng_for(seed)), [x])

    x, g, beta = leaf(rng, (3, 6)), leaf(rng, (6,)), leaf(rng, (6,))
    errs["layer_norm"] = coordinate_check(lambda: readout(T.layer_norm(x, g, beta), rng_for(seed)), [x, g, beta])

    table = leaf(rng, (7, 4))
    ids = rng.integers(0, 7, size=(2, 5))
    errs["embedding"] = coordinate_check(lambda: readout(T.embedding(table, ids), rng_for(seed)), [table])

    logits = leaf(rng, (2, 3, 6))
    labels = rng.integers(1, 6, size=(2, 3))
    labels[1, 2] = 0
    errs["cross_entropy"] = coordinate_check(
        lambda: T.cross_entropy_label_smoothed(logits, labels, 0.1, 0), [logits])

    u, v = leaf(rng, (4, 5)), leaf(rng, (4, 5))
    errs["info_nce"] = coordinate_check(lambda: info_nce(ContrastiveBatch(
        T.l2_normalize(u, axis=-1), T.l2_normalize(v, axis=-1), 0.3)), [u, v])

    d = 8
    fusion = CVLM(d, 2, rng, np.float64)
    s, h = leaf(rng, (2, 3, d)), leaf(rng, (2, 4, d))
    direction = Tensor(probe.standard_normal((2, 3, d)))
    fn = lambda: (fusion(EncoderStates(s, np.zeros((2, 3), bool)),  # noqa: E731
                         EncoderStates(h, np.zeros((2, 4), bool))).states * direction).sum()
    errs["cvlm"] = directional_check(fn, [s, h] + fusion.parameters(), probe, directions=2)

    layer = DecoderLayer(d, 2, 16, rng, np.float64)
    x, mem = leaf(rng, (2, 4, d)), leaf(rng, (2, 3, d))
    bias = causal_bias(4, np.float64)[None, None]
    direction = Tensor(probe.standard_normal((2, 4, d)))
    fn = lambda: (layer(x, mem, bias, None) * direction).sum()  # noqa: E731
    errs["decoder_layer"] = directional_check(fn, [x, mem] + layer.parameters(), probe, directions=2)
    return errs


def test_gradient_integrity():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(100):
        for name, err in _op_checks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 120
    check(1, "gradient integrity", ok, f"worst {top} rel err {worst[top]:.1e} over 100 seeds, {elapsed:.1f}s")


# -- 2: InfoNCE identities ------------------------------------------------------------------

def _nce(z, x, tau):
    return float(info_nce(ContrastiveBatch(Tensor(x), Tensor(z), tau)).data)


def _brute(z, x, tau):
    total = 0.0
    for k in range(len(z)):
        num = math.exp(z[k] @ x[k] / tau)
        total -= math.log(num / sum(math.exp(z[k] @ x[j] / tau) for j in range(len(z))))
        total -= math.log(num / sum(math.exp(x[k] @ z[j] / tau) for j in range(len(z))))
    return total / len(z)


def test_info_nce_identities():
    rng = rng_for(2)

    def unit(n, d):
        m = rng.standard_normal((n, d))
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    single = max(abs(_nce(unit(1, 6), unit(1, 6), 0.1)) for _ in range(20))
    same = 0.0
    for B in range(2, 10):
        e = np.repeat(unit(1, 6), B, axis=0)
        same = max(same, abs(_nce(e, e, 0.1) - 2 * math.log(B)))
    ortho = abs(_nce(np.eye(2), np.eye(2), 1.0) - 2 * math.log(1 + math.exp(-1)))
    brute = 0.0
    for _ in range(50):
        B, tau = int(rng.integers(1, 9)), float(rng.uniform(0.05, 1.0))
        z, x = unit(B, 6), unit(B, 6)
        brute = max(brute, abs(_nce(z, x, tau) - _brute(z, x, tau)))
    ok = single < 1e-9 and same < 1e-6 and ortho < 1e-6 and brute < 1e-9
    check(2, "InfoNCE identities", ok,
          f"B=1 {single:.1e}, identical {same:.1e}, orthogonal {ortho:.1e}, brute force {brute:.1e}")


# -- 3: temperature sampling ---------------------------------------------------------------

def test_temperature_sampler():
    rng = rng_for(3)
    sums = 0.0
    for _ in range(200):
        sizes = rng.integers(1, 10_000, size=int(rng.integers(1, 12)))
        for tau in (1.0, 2.0, 5.0, 37.0, math.inf):
            sums = max(sums, abs(sampling_probs(sizes, tau).sum() - 1.0))
    sizes = np.array([1000, 500, 250, 125, 60])
    prop = np.abs(sampling_probs(sizes, 1.0) - sizes / sizes.sum()).max()
    q = sampling_probs(sizes, 5.0)
    freq = np.bincount(draw_corpora(q, 100_000, rng_for(4)), minlength=len(q)) / 100_000
    dev = np.abs(freq - q).max()
    cfg = SamplerConfig(peak_temperature=5.0, initial_temperature=1.0, warmup_epochs=5)
    ends = (epoch_temperature(0, cfg) == 1.0 and epoch_temperature(5, cfg) == 5.0
            and epoch_temperature(50, cfg) == 5.0)
    ok = sums <= 1e-12 and prop <= 1e-15 and dev <= 0.01 and ends
    check(3, "temperature sampler", ok,
          f"sum err {sums:.1e}, proportional err {prop:.1e}, 100k draw dev {dev:.4f}, ramp ends {ends}")


# -- 4: branch schedule -------------------------------------------------------------------

def test_branch_schedule_frequencies():
    rng = rng_for(4)
    sched = BranchSchedule()
    draws = [pick_branch(sched, i, rng) for i in range(100_000)]
    freq = np.array([draws.count(b) for b in BRANCHES]) / len(draws)
    dev = np.abs(freq - [0.25, 0.25, 0.50]).max()
    check(4, "branch schedule", dev <= 0.01, f"frequencies {np.round(freq, 4).tolist()}, max dev {dev:.4f}")


# -- 5: fusion contract ----------------------------------------------------------------------

def test_cvlm_contract():
    d = 8
    rng = rng_for(5)
    fusion = CVLM(d, 2, rng, np.float64).eval()
    shapes_ok, rows, single = True, 0.0, 0.0
    for U in range(1, 9):
        for V in range(1, 9):
            s = EncoderStates(Tensor(rng.standard_normal((2, U, d))), np.zeros((2, U), bool))
            h = EncoderStates(Tensor(rng.standard_normal((2, V, d))), np.zeros((2, V), bool))
            out = fusion(s, h).states.data
            shapes_ok &= out.shape == (2, U, d)
            rows = max(rows, np.abs(fusion.last_attention.sum(axis=-1) - 1.0).max())
            if V == 1:
                a = fusion.attn
                value = h.hidden.data @ a.v.weight.data + a.v.bias.data
                expected = value @ a.o.weight.data + a.o.bias.data
                single = max(single, np.abs(out - s.hidden.data - expected).max())
    ok = shapes_ok and rows <= 1e-6 and single <= 1e-6
    check(5, "fusion shape contract", ok,
          f"U x V grid shapes {shapes_ok}, row-sum err {rows:.1e}, V=1 err {single:.1e}")


# -- 6: patchify ---------------------------------------------------------------------------

def test_patchify_bijection():
    rng = rng_for(6)
    combos = [(P * h, P * w, P) for P in (1, 2, 4, 8) for h in range(1, 5) for w in range(1, 5)]
    counts_ok = all(patchify(np.zeros((H, W, 3)), P).num_patches == H * W // P**2 for H, W, P in combos)
    exact = True
    for _ in range(1000):
        H, W, P = combos[int(rng.integers(len(combos)))]
        img = rng.uniform(size=(H, W, 3))
        exact &= np.array_equal(unpatchify(patchify(img, P)), img)
    check(6, "patchify bijection", counts_ok and exact,
          f"{len(combos)} (H,W,P) counts ok {counts_ok}, 1000 round trips exact {exact}")


# -- 7, 8, 9: desk-scale training runs -----------------------------------------------------

@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_toy")
    generate_toy_corpus(out, langs=4, size=200, img=32, patch=8, seed=17)
    return out


def _overfit_config(data_dir, out_dir, lam):
    cfg = RunConfig.load(OVERFIT_CONFIG)
    cfg.data.dir = str(data_dir)
    cfg.train.out_dir = str(out_dir)
    cfg.loss.lam = lam
    return cfg


def _train_run(toy_corpus, tmp_path_factory, lam):
    out = tmp_path_factory.mktemp(f"overfit_lambda{lam:g}")
    train_set, test_set = load_toy_splits(toy_corpus, 8)
    trainer = Trainer(_overfit_config(toy_corpus, out, lam), train_set, test_set, out)
    init_cos = parallel_cosine(trainer.model, train_set.all_samples(), train_set.vocab)
    start = time.perf_counter()
    result = trainer.run(save=False)
    elapsed = time.perf_counter() - start
    last = [r["l_all"] for r in result.metrics[-trainer.steps_per_epoch:]]
    return {"trainer": trainer, "model": result.model, "train": train_set, "test": test_set,
            "seconds": elapsed, "epochs": trainer.epoch + 1, "final_l_all": float(np.mean(last)),
            "init_cos": init_cos, "metrics": result.metrics}


@pytest.fixture(scope="session")
def run_lambda1(toy_corpus, tmp_path_factory):
    return _train_run(toy_corpus, tmp_path_factory, 1.0)


@pytest.fixture(scope="session")
def run_lambda0(toy_corpus, tmp_path_factory):
    return _train_run(toy_corpus, tmp_path_factory, 0.0)


def test_overfit_run(run_lambda1):
    r = run_lambda1
    samples = r["train"].all_samples()
    bleu = evaluate_bleu(r["model"], samples, r["train"].vocab, "translate")
    ok = r["final_l_all"] < 0.1 and bleu > 95 and r["seconds"] < RUN_BUDGET_S and r["epochs"] <= 30
    check(7, "overfit run", ok,
          f"final-epoch mean l_all {r['final_l_all']:.4f}, train BLEU {bleu:.2f} on {len(samples)} pairs, "
          f"{r['epochs']} epochs in {r['seconds']:.0f}s")


def test_alignment_effect(run_lambda1, run_lambda0):
    samples = run_lambda1["train"].all_samples()
    vocab = run_lambda1["train"].vocab
    init = run_lambda1["init_cos"]
    with_c = parallel_cosine(run_lambda1["model"], samples, vocab)
    without = parallel_cosine(run_lambda0["model"], samples, vocab)
    ok = with_c - init > 0.05 and with_c - without > 0.05 and run_lambda0["seconds"] < RUN_BUDGET_S
    check(8, "alignment effect", ok,
          f"parallel cosine: init {init:.3f}, lambda=1 {with_c:.3f}, lambda=0 {without:.3f}")


def test_masked_source_robustness(run_lambda1):
    r = run_lambda1
    full, vocab = r["model"], r["train"].vocab
    ablated = ablate_vision(full)
    test, train = r["test"].all_samples(), r["train"].all_samples()
    full_1 = masked_source_eval(full, test, vocab, [1.0])[1.0]
    abl_1 = masked_source_eval(ablated, test, vocab, [1.0])[1.0]
    full_0 = masked_source_eval(full, train, vocab, [0.0])[0.0]
    abl_0 = masked_source_eval(ablated, train, vocab, [0.0])[0.0]
    ok = full_1 > abl_1 and abl_1 < 5 and full_0 > 90 and abl_0 > 90
    check(9, "masked-source robustness", ok,
          f"ratio 1.0 on test: full {full_1:.2f} vs ablation {abl_1:.2f}; "
          f"ratio 0.0 on train: full {full_0:.2f}, ablation {abl_0:.2f}")


# -- 10, 11: determinism and the logged decomposition ---------------------------------------

def test_determinism_and_persistence(toy_corpus, tmp_path):
    train_set, _ = load_toy_splits(toy_corpus, 8)
    logs = []
    trainers = []
    for name in ("a", "b"):
        cfg = small_run_config(toy_corpus, tmp_path / name, train={"epochs": 1, "max_steps": 40,
                                                                  "source_mask_max": 0.5})
        t = Trainer(cfg, train_set, None, tmp_path / name)
        t.run(save=False)
        logs.append((tmp_path / name / "metrics.jsonl").read_bytes())
        trainers.append(t)
    same_log = logs[0] == logs[1] and len(logs[0]) > 0

    t = trainers[0]
    path = tmp_path / "model.ckpt"
    t.save(path)
    loaded, vocab, _ = load_model(path, t.cfg.config_hash())
    batch = collate(train_set.all_samples()[:16], vocab)
    t.model.eval()
    exact = all(t.model.branch_loss(batch, b).data.tobytes() == loaded.branch_loss(batch, b).data.tobytes()
                for b in BRANCHES)
    exact &= np.array_equal(t.model.memory(batch, "fused").hidden.data, loaded.memory(batch, "fused").hidden.data)
    check(10, "determinism and persistence", same_log and exact,
          f"metric logs byte-identical {same_log}, reloaded forward bit-exact {exact}")


def test_loss_decomposition(toy_corpus, tmp_path):
    train_set, _ = load_toy_splits(toy_corpus, 8)
    cfg = small_run_config(toy_corpus, tmp_path, train={"epochs": 100, "max_steps": 500},
                           loss={"lambda": 1.0})
    metrics = Trainer(cfg, train_set, None, tmp_path).run(save=False).metrics
    worst = 0.0
    for r in metrics:
        l_c = r["l_c"] if r["l_c"] is not None else 0.0
        worst = max(worst, abs(r["l_all"] - (r["l_m"] + r["lambda"] * l_c)))
    contrastive_steps = sum(r["l_c"] is not None for r in metrics)
    ok = len(metrics) == 500 and worst <= 1e-9
    check(11, "loss decomposition", ok,
          f"{len(metrics)} steps ({contrastive_steps} with contrastive term), max |l_all - l_m - lambda*l_c| "
          f"{worst:.1e}")
