"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line; the lines are repeated in an
"acceptance criteria" section at the end of the pytest run. Criterion 10 is
statistical and soft: it is reported but never fails the suite.
"""

import itertools
import os
import time

import numpy as np
import pytest

from tarnet.blocks import TCNBlock, frozen_norm_stats
from tarnet.cli import main, run_grid, run_training
from tarnet.config import RunConfig
from tarnet.data import split, synth_corpus
from tarnet.encoder import EncoderConfig, MultiScaleEncoder, encode, receptive_field
from tarnet.frontend import FrontendConfig
from tarnet.gradcheck import gradient_suites
from tarnet.metrics import approx_randomization, topk_accuracy, weighted_prf
from tarnet.model import ModelConfig, TarnetModel, count_params, load_model
from tarnet.pooling import AttentionNet, Pooling, asp, stats_pool
from tarnet.seeding import stream, stream_seed
from tarnet.tensor import Tensor
from tarnet.train import TrainState, evaluate, train_loop

# Desk training recipe shared by criteria 9-11: the stated lr, weight decay
# and plain SGD, with small batches of 1 s crops so an epoch fits a laptop.
DESK_TRAIN = dict(lr=0.001, weight_decay=5e-4, momentum=0.0, batch_size=4, crop_seconds=1.0, epochs=20)
ABLATION_EPOCHS = 5
ABLATION_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk_corpus():
    corpus = synth_corpus(n_speakers=10, utt_per_spk=50, dur=2.0, seed=stream_seed(0, "data"))
    train, val, test = split(corpus, seed=stream_seed(0, "split"))
    return train, val, test


def desk_run_config(**train):
    rc = RunConfig()
    return rc.replace("train", **{**DESK_TRAIN, **train})


# 1 -----------------------------------------------------------------------------

def test_01_gradient_fidelity(report_criterion):
    t0 = time.perf_counter()
    results = [(suite, r) for suite, run in gradient_suites(seed=0) for r in run()]
    elapsed = time.perf_counter() - t0
    worst_suite, worst = max(results, key=lambda sr: sr[1].error)
    ok = all(r.passed for _, r in results) and elapsed < 30
    report_criterion(1, ok, f"gradcheck {len(results)} tensors, worst {worst_suite}/{worst.name} "
                            f"rel err {worst.error:.2e} (< 1e-4), {elapsed:.1f} s (< 30 s)")
    assert ok
    assert main(["gradcheck"]) == 0


# 2 -----------------------------------------------------------------------------

def test_02_asp_reduces_to_sp(report_criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        D, T = int(rng.integers(1, 17)), int(rng.integers(1, 60))
        net = AttentionNet(D, int(rng.integers(1, 33)), rng)
        net.conv2.weight.data[:] = 0.0
        net.conv2.bias.data[:] = 0.0
        z = Tensor(rng.normal(size=(D, T)) * rng.uniform(0.1, 10.0))
        worst = max(worst, float(np.abs(asp(z, net).data - stats_pool(z).data).max()))
    ok = worst < 1e-9
    report_criterion(2, ok, f"ASP with zeroed second layer vs SP, 100 inputs: max |diff| {worst:.1e} (< 1e-9)")
    assert ok


# 3 -----------------------------------------------------------------------------

def frame_influence(enc, x, center, bump=1.0):
    """Max |change| of X_L[:, center] when each input frame is bumped; one batched forward.

    Frames near the edge of the receptive field reach the centre through
    18 blocks of edge taps, so a unit bump arrives at ~1e-16, below the
    resolution of an O(1) output. A large bump lifts that tail above
    rounding without changing which frames are connected.
    """
    T = x.shape[-1]
    bumped = np.repeat(x[None], T, axis=0)
    bumped[np.arange(T), :, np.arange(T)] += bump
    base = enc(Tensor(x)).x_l.data[:, center]
    moved = enc(Tensor(bumped)).x_l.data[:, :, center]
    return np.abs(moved - base[None]).max(axis=1)


def test_03_receptive_field(report_criterion):
    cfg = EncoderConfig(channels=4, hidden=8)  # paper dilations, R=3, K=3; width is irrelevant to the support
    rf = receptive_field(cfg)
    half = (rf - 1) // 2
    T = 2 * half + 41
    center = T // 2
    dist = np.abs(np.arange(T) - center)
    outside, inside, live = [], [], []
    for draw in range(3):
        rng = np.random.default_rng(100 + draw)
        enc = MultiScaleEncoder(cfg, rng)
        for _, p in enc.named_parameters():
            p.data = p.data + 0.3 * rng.normal(size=p.shape)
        x = rng.normal(size=(4, T))
        with frozen_norm_stats(enc, lambda v: enc(Tensor(v)), x):
            inf = frame_influence(enc, x, center, bump=1e6)
        outside.append(inf[dist > half].max())
        inside.append(inf[dist <= half].min())
        live.append(frame_influence(enc, x, center)[dist > half].max())
    ok = rf == 379 and max(outside) == 0.0 and min(inside) > 0.0
    report_criterion(3, ok, f"receptive_field = {rf} (379); 3 draws with gLN statistics pinned: max influence "
                            f"beyond +-{half} = {max(outside):.1e}, min within = {min(inside):.1e}; "
                            f"with live gLN statistics the influence beyond is {max(live):.1e}, not 0")
    assert ok
    assert max(live) > 0  # global normalisation couples every frame


# 4 -----------------------------------------------------------------------------

def test_04_permutation_invariance(report_criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    pools = {kind: Pooling(kind, 6, 8, rng) for kind in ("asp", "sp", "avg", "max")}
    pools["asp"].net.conv2.weight.data = rng.normal(size=pools["asp"].net.conv2.weight.shape)
    for _ in range(50):
        z = rng.normal(size=(6, int(rng.integers(2, 80))))
        perm = rng.permutation(z.shape[1])
        for pool in pools.values():
            worst = max(worst, float(np.abs(pool(Tensor(z)).data - pool(Tensor(z[:, perm])).data).max()))
    ok = worst < 1e-12
    report_criterion(4, ok, f"pooling under 50 random frame permutations (asp, sp, avg, max): max |diff| {worst:.1e} (< 1e-12)")
    assert ok


# 5 -----------------------------------------------------------------------------

def test_05_identity_initialization(report_criterion):
    rng = np.random.default_rng(5)
    enc = MultiScaleEncoder(EncoderConfig(), rng)
    x0 = rng.normal(size=(2, 64, 150))
    outs = encode(Tensor(x0), enc)
    ok = all(np.array_equal(x.data, x0) for x in outs)
    report_criterion(5, ok, "default encoder with zero out_conv: X_S, X_M, X_L == x0 bit-exactly")
    assert ok


# 6 -----------------------------------------------------------------------------

def random_model_config(rng):
    dil = [sorted(rng.choice([1, 2, 4, 8, 16], size=int(rng.integers(0, 3)), replace=False).tolist()) for _ in range(3)]
    if not any(dil):
        dil[1] = [4]
    enc = EncoderConfig(channels=int(rng.integers(1, 33)), fusion=int(rng.integers(1, 33)),
                        hidden=int(rng.integers(1, 33)), kernel_size=int(rng.choice([1, 3, 5])),
                        dilations_s=dil[0], dilations_m=dil[1], dilations_l=dil[2], repeats=int(rng.integers(1, 4)))
    return ModelConfig(n_mels=int(rng.integers(2, 41)), n_speakers=int(rng.integers(2, 20)),
                       embed_dim=int(rng.integers(1, 33)), pooling=str(rng.choice(["asp", "sp", "avg", "max"])),
                       attention_hidden=int(rng.integers(1, 17)), encoder=enc)


def test_06_parameter_counting(report_criterion):
    rng = np.random.default_rng(6)
    mismatches = 0
    for i in range(10):
        cfg = random_model_config(rng)
        model = TarnetModel(cfg, i)
        mismatches += count_params(cfg) != sum(p.data.size for p in model.parameters())
    block = TCNBlock(2, 4, 1, 3, rng)
    block_count = sum(p.data.size for p in block.parameters())
    ok = mismatches == 0 and TCNBlock.count(2, 4, 3) == block_count == 62
    report_criterion(6, ok, f"count_params vs enumeration on 10 random configs: {mismatches} mismatches; "
                            f"C=2,H=4,K=3 block = {block_count} (62)")
    assert ok


# 7 -----------------------------------------------------------------------------

def exhaustive_p(a, b):
    d = np.asarray(a, float) - np.asarray(b, float)
    observed = abs(d.mean())
    signs = np.array(list(itertools.product([1.0, -1.0], repeat=len(d))))
    return float(np.mean(np.abs(signs @ d) / len(d) >= observed - 1e-12))


def test_07_ar_oracle(report_criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(20):
        n = int(rng.integers(1, 13))
        a, b = rng.integers(0, 2, size=n), rng.integers(0, 2, size=n)
        p = approx_randomization(a, b, n_perm=10000, seed=i).p_value
        worst = max(worst, abs(p - exhaustive_p(a, b)))
    same = rng.integers(0, 2, size=12)
    p_same = approx_randomization(same, same, n_perm=10000, seed=0).p_value
    ok = worst <= 0.02 and p_same == 1.0
    report_criterion(7, ok, f"AR vs exhaustive 2^n on 20 vectors (n <= 12): max |dp| {worst:.4f} (<= 0.02); "
                            f"identical inputs p = {p_same}")
    assert ok


# 8 -----------------------------------------------------------------------------

def test_08_metric_identities(report_criterion):
    rng = np.random.default_rng(8)
    recall_gap = 0.0
    for _ in range(100):
        n, k = int(rng.integers(1, 50)), int(rng.integers(2, 8))
        true, pred = rng.integers(0, k, size=n), rng.integers(0, k, size=n)
        recall_gap = max(recall_gap, abs(weighted_prf(true, pred)[1] - np.mean(true == pred)))
    monotone = True
    for _ in range(20):
        scores, labels = rng.normal(size=(40, 10)), rng.integers(0, 10, size=40)
        accs = [topk_accuracy(scores, labels, k) for k in range(1, 11)]
        monotone &= all(x <= y for x, y in zip(accs, accs[1:]))
    p, r, f = weighted_prf([0, 0, 1, 1], [0, 1, 1, 1])
    hand = np.allclose([p, r, f], [5 / 6, 3 / 4, 11 / 15], atol=1e-12)
    ok = recall_gap < 1e-12 and monotone and hand
    report_criterion(8, ok, f"weighted recall == accuracy on 100 cases (max gap {recall_gap:.1e}); top-k monotone: "
                            f"{monotone}; hand PRF ({p:.4f}, {r:.4f}, {f:.4f}) == (5/6, 3/4, 11/15)")
    assert ok


# 9 -----------------------------------------------------------------------------

def test_09_end_to_end_learning(report_criterion, desk_corpus, tmp_path):
    train, val, test = desk_corpus
    rc = desk_run_config()
    t0 = time.perf_counter()
    state = run_training(rc, train, val, 10, tmp_path)
    elapsed = time.perf_counter() - t0
    fcfg = rc.frontend
    train_top1 = evaluate(state.model, train, fcfg).top1
    test_top1 = evaluate(state.model, test, fcfg).top1
    best, _, _ = load_model(tmp_path / "best.ckpt")
    best_test_top1 = evaluate(best, test, fcfg).top1
    ok = train_top1 >= 0.95 and test_top1 >= 0.90 and best_test_top1 >= 0.90 and state.epoch <= 100 and elapsed < 900
    report_criterion(9, ok, f"desk config (C=64, D=128, E=192), {state.epoch} epochs plain SGD lr 0.001 wd 5e-4 "
                            f"batch {rc.train.batch_size}: train top1 {train_top1:.4f} (>= 0.95), test top1 "
                            f"{test_top1:.4f} (>= 0.90), best.ckpt test top1 {best_test_top1:.4f}, "
                            f"{elapsed:.0f} s on {os.cpu_count()} core(s) (< 900 s)")
    assert ok


# 10 ----------------------------------------------------------------------------

def test_10_ablation_direction(report_criterion, desk_corpus, tmp_path):
    train, val, test = desk_corpus
    rc = desk_run_config(epochs=ABLATION_EPOCHS)
    configs = ("SML", "S", "M", "L")
    jobs = []
    for seed, stages in itertools.product(ABLATION_SEEDS, configs):
        run = rc.replace("train", seed=seed).replace("encoder", **vars(rc.encoder.with_stages(stages)))
        jobs.append((run, train, val, 10, tmp_path / f"{stages}_seed{seed}", 0))
    run_grid(jobs, jobs=os.cpu_count() or 1)
    correct = {c: [] for c in configs}
    for seed, stages in itertools.product(ABLATION_SEEDS, configs):
        model, _, _ = load_model(tmp_path / f"{stages}_seed{seed}" / "last.ckpt")
        correct[stages].append(evaluate(model, test, rc.frontend).correct(1))
    top1 = {c: float(np.mean(correct[c])) for c in configs}
    paired = {c: np.concatenate(correct[c]) for c in configs}
    parts, ok = [], True
    for single in ("S", "M", "L"):
        p = approx_randomization(paired["SML"], paired[single], n_perm=10000, seed=stream_seed(0, "ar")).p_value
        ok &= top1["SML"] >= top1[single] - 0.02
        parts.append(f"{single} {top1[single]:.3f} (AR p {p:.3f})")
    report_criterion(10, ok, f"soft, {len(ABLATION_SEEDS)} seeds x {ABLATION_EPOCHS} epochs: SML test top1 "
                             f"{top1['SML']:.3f} vs " + ", ".join(parts) + " [requires SML >= single - 0.02]")
    # statistical and soft by definition: reported, not asserted
    assert all(0.0 <= v <= 1.0 for v in top1.values())


# 11 ----------------------------------------------------------------------------

def test_11_checkpoint_determinism(report_criterion, tmp_path):
    corpus = synth_corpus(n_speakers=3, utt_per_spk=10, dur=2.0, seed=11)
    train, val, _ = split(corpus, seed=11)
    cfg = desk_run_config(epochs=4).train
    fcfg = FrontendConfig()
    model = TarnetModel(ModelConfig(n_speakers=3), stream(0, "init"))
    full = train_loop(model, train, val, cfg, fcfg, tmp_path / "full", save_every=2)
    state, _ = TrainState.load(tmp_path / "full" / "epoch_002.ckpt")
    resumed = train_loop(state, train, val, cfg, fcfg, tmp_path / "resumed")
    identical = all(np.array_equal(a.data, b.data) for a, b in zip(full.model.parameters(), resumed.model.parameters()))
    ok = identical and resumed.epoch == full.epoch == 4
    report_criterion(11, ok, "4 epochs uninterrupted vs resume from epoch_002.ckpt for 2 more: final parameters "
                             f"{'bit-identical' if identical else 'DIFFER'}")
    assert ok
