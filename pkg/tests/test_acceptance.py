"""Acceptance gate: one test per release criterion, each printing PASS/FAIL.

The training-dependent criteria share one session-scoped run on the default
synthetic configuration (40 train / 10 val volumes of 32x64x64, 4 classes,
at most 2000 iterations), so this module takes several minutes on CPU.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch

from sliceprop.core import Click, MaskScoreVolume, argmax_labeling
from sliceprop.interaction import (
    ClickCapacityError,
    InteractionSession,
    adaptive_combine,
    combine_rounds,
)
from sliceprop.matching import hungarian_match
from sliceprop.memory_agg import MemoryState, fuse_memory, init_next_center
from sliceprop.metrics import dsc, evaluate_labels, hd95, nsd
from sliceprop.model import ModelConfig, SegModel, kmeans_cross_attention
from sliceprop.propagate import SweepOptions, propagate_volume_auto, refinement_loop
from sliceprop.synth import SynthConfig, generate_volume, preprocess
from sliceprop.train_loop import Dataset, TrainConfig, chain_loss, train

from tests.test_metrics import brute_hd95, brute_nsd, random_blob
from tests.test_model import assert_grads_match


def report(name: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
    assert passed, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# shared trained model (one run feeds four criteria)

@pytest.fixture(scope="session")
def toy_run():
    synth = SynthConfig()
    volumes, labels = [], []
    for i in range(synth.n_volumes):
        vol, lab = generate_volume(synth, i)
        volumes.append(preprocess(vol))
        labels.append(lab)
    n_val = int(round(synth.n_volumes * synth.val_fraction))
    dataset = Dataset(
        volumes=volumes,
        labels=labels,
        train_ids=list(range(synth.n_volumes - n_val)),
        val_ids=list(range(synth.n_volumes - n_val, synth.n_volumes)),
        n_classes=synth.n_classes,
    )
    t0 = time.monotonic()
    model, log = train(TrainConfig(), ModelConfig(n_classes=synth.n_classes), dataset)
    elapsed = time.monotonic() - t0
    return model, dataset, log, elapsed


def _val_mean(model, dataset, options, vol_ids, metric="dsc"):
    values = []
    for i in vol_ids:
        scores = propagate_volume_auto(model, dataset.volumes[i], options)
        pred = argmax_labeling(scores, 0.5)
        rep = evaluate_labels(pred.labels, dataset.labels[i].labels, dataset.n_classes)
        m = rep.mean(metric)
        if np.isfinite(m):
            values.append(m)
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# closed-form / oracle criteria

def test_hard_attention_one_shot_equals_decomposition():
    """One-shot hard cross-attention equals assign-then-update, bit-exact."""
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    worst = True
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        hw = int(rng.integers(1, 65))
        d = int(rng.integers(1, 9))
        c = torch.from_numpy(rng.normal(size=(n, d)))
        q = torch.from_numpy(rng.normal(size=(n, d)))
        k = torch.from_numpy(rng.normal(size=(hw, d)))
        v = torch.from_numpy(rng.normal(size=(hw, d)))
        one_shot, a = kmeans_cross_attention(c, q, k, v)
        # decomposition: build the one-hot assignment, then update
        idx = torch.argmax(q @ k.T, dim=0)
        a_ref = torch.zeros(n, hw, dtype=c.dtype)
        a_ref[idx, torch.arange(hw)] = 1.0
        if not (torch.equal(one_shot, c + a_ref @ v) and torch.equal(a, a_ref)):
            worst = False
            break
    elapsed = time.monotonic() - t0
    report("one-shot hard attention == assignment-then-update (1000 cases)",
           worst and elapsed < 5.0, f"{elapsed:.2f}s")


def test_assignment_columns_one_hot():
    torch.manual_seed(0)
    model = SegModel(ModelConfig(d_model=16, n_decoder_layers=3, n_classes=3,
                                 per_class_centers=2, ffn_hidden=32, seed=0))
    ok = True
    for trial in range(20):
        out = model(torch.rand(24, 24) * 255)
        for a in out.per_layer_assignments:
            col_sums = a.sum(dim=0)
            if not torch.equal(col_sums, torch.ones_like(col_sums)):
                ok = False
    report("assignment columns sum to exactly 1 after every decoder layer", ok)


def test_adaptive_accumulation_recursion_equals_unrolled():
    worst = 0.0
    for beta in (0.0, 0.5, 0.8, 1.0):
        rng = np.random.default_rng(int(beta * 100))
        for _ in range(50):
            os = [torch.from_numpy(rng.normal(size=8)) for _ in range(6)]
            acc = None
            for o in os:
                acc = adaptive_combine(o, acc, beta)
            unrolled = sum(beta ** i * os[-1 - i] for i in range(len(os)))
            worst = max(worst, float((acc - unrolled).abs().max()))
    report("round accumulation recursion == unrolled weighted sum",
           worst <= 1e-6, f"max abs diff {worst:.2e}")


def test_round_fusion_monotone():
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(500):
        n_rounds = int(rng.integers(2, 6))
        rounds = [(rng.uniform(size=(2, 6, 6)), float(rng.uniform()))
                  for _ in range(n_rounds)]
        prev = combine_rounds(rounds[:1])
        for r in range(2, n_rounds + 1):
            cur = combine_rounds(rounds[:r])
            if not (cur >= prev).all():
                ok = False
            prev = cur
    report("appending a refinement round never decreases any voxel score (500 stacks)", ok)


def test_hungarian_equals_enumeration():
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    ok = True
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        n = k + int(rng.integers(0, 3))
        cost = rng.uniform(0, 10, size=(n, k))
        best = min(
            sum(cost[r, j] for j, r in enumerate(rows))
            for rows in itertools.permutations(range(n), k)
        )
        if abs(hungarian_match(cost).total_cost - best) > 1e-12:
            ok = False
            break
    elapsed = time.monotonic() - t0
    report("Hungarian total cost == exhaustive enumeration (1000 cases, K<=6)",
           ok and elapsed < 10.0, f"{elapsed:.2f}s")


def test_gradient_checks():
    cfg = ModelConfig(d_model=8, n_decoder_layers=1, n_classes=2,
                      per_class_centers=1, ffn_hidden=16, seed=0)
    model = SegModel(cfg).double()
    torch.manual_seed(0)
    img = torch.rand(16, 16, dtype=torch.float64) * 255
    lab = torch.zeros(16, 16, dtype=torch.long)
    lab[4:10, 4:10] = 1

    # decoder layer path
    def decoder_loss():
        out = model(img)
        return out.mask_logits.square().mean() + out.class_logits.square().mean()

    assert_grads_match(list(model.parameters()), decoder_loss)

    # click FFN
    o = torch.randn(8, dtype=torch.float64)
    assert_grads_match(
        list(model.click_ffn.parameters()),
        lambda: model.click_ffn(o).square().sum(),
    )

    # memory fuse + init
    h0 = torch.randn(8, dtype=torch.float64)
    c0 = torch.randn(8, dtype=torch.float64)

    def memory_loss():
        state = fuse_memory(model, MemoryState(fused=h0), c0)
        return init_next_center(model, c0, state).square().sum()

    assert_grads_match(list(model.memory.parameters()), memory_loss)

    # total training loss on a two-slice chain
    cfg_train = TrainConfig(crop_size=(16, 16), click_init_prob=1.0, seed=0)
    sample = [(img, lab), (img, lab)]

    def train_loss():
        return chain_loss(model, sample, np.random.default_rng(0), cfg_train)

    assert_grads_match(list(model.parameters()), train_loss)
    report("finite-difference gradient checks (decoder, click FFN, memory, loss)", True)


def test_metric_oracles():
    rng = np.random.default_rng(11)
    worst = 0.0
    ok = True
    for _ in range(200):
        pred, gt = random_blob(rng), random_blob(rng)
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        inter = float(np.logical_and(pred, gt).sum())
        d_ref = 2 * inter / (pred.sum() + gt.sum())
        if dsc(pred, gt) != d_ref:
            ok = False
        worst = max(worst, abs(hd95(pred, gt, spacing) - brute_hd95(pred, gt, spacing)))
        worst = max(worst, abs(nsd(pred, gt, spacing, 1.0) - brute_nsd(pred, gt, spacing, 1.0)))
    report("DSC exact and HD95/NSD within 1e-9 of brute force (200 pairs)",
           ok and worst <= 1e-9, f"max dist err {worst:.2e}")


# ---------------------------------------------------------------------------
# trained-model criteria

def test_toy_training_reaches_target(toy_run):
    model, dataset, log, elapsed = toy_run
    final = [e["val_dsc"] for e in log if "val_dsc" in e][-1]
    report("toy training: automatic val mean DSC >= 0.80 within 2000 iterations",
           final >= 0.80 and elapsed <= 30 * 60,
           f"dsc {final:.4f}, {elapsed / 60:.1f} min")


def test_propagation_ablation_direction(toy_run):
    model, dataset, _, _ = toy_run
    # carrying centers slice to slice (as deployed, with memory conditioning)
    # against independent per-slice decoding
    vol_ids = dataset.val_ids
    with_prop = SweepOptions(propagate=True)
    without = SweepOptions(propagate=False)
    dsc_with = _val_mean(model, dataset, with_prop, vol_ids)
    dsc_without = _val_mean(model, dataset, without, vol_ids)
    hd_with = _val_mean(model, dataset, with_prop, vol_ids, "hd95")
    hd_without = _val_mean(model, dataset, without, vol_ids, "hd95")
    report(
        "propagation beats no-propagation by >= 2 DSC points with lower HD95",
        (dsc_with - dsc_without) >= 0.02 and hd_with < hd_without,
        f"dsc {dsc_without:.4f}->{dsc_with:.4f}, hd95 {hd_without:.2f}->{hd_with:.2f}",
    )


def _interactive_mean(model, dataset, vol_ids, n_rounds, beta):
    dscs = []
    for i in vol_ids:
        results = refinement_loop(
            model, dataset.volumes[i], dataset.labels[i], n_rounds=n_rounds, beta=beta
        )
        if not results:
            dscs.append(1.0)
            continue
        pred = argmax_labeling(results[-1][1], 0.5)
        rep = evaluate_labels(pred.labels, dataset.labels[i].labels, dataset.n_classes)
        dscs.append(rep.mean("dsc"))
    return float(np.mean(dscs))


def test_interactive_gain_direction(toy_run):
    model, dataset, _, _ = toy_run
    vol_ids = dataset.val_ids[:5]
    auto = _val_mean(model, dataset, SweepOptions(), vol_ids)
    at5 = _interactive_mean(model, dataset, vol_ids, 5, beta=0.8)
    at15 = _interactive_mean(model, dataset, vol_ids, 15, beta=0.8)
    report(
        "5 simulated clicks >= automatic DSC; 15 rounds >= 5 rounds",
        at5 >= auto and at15 >= at5,
        f"auto {auto:.4f}, 5 rounds {at5:.4f}, 15 rounds {at15:.4f}",
    )


def test_adaptive_sampling_direction(toy_run):
    model, dataset, _, _ = toy_run
    vol_ids = dataset.val_ids[:5]
    adaptive = _interactive_mean(model, dataset, vol_ids, 5, beta=0.8)
    plain = _interactive_mean(model, dataset, vol_ids, 5, beta=0.0)
    report(
        "adaptive round accumulation >= accumulation disabled",
        adaptive >= plain,
        f"beta 0.8: {adaptive:.4f}, beta 0: {plain:.4f}",
    )


def test_constant_propagated_state(toy_run):
    model, dataset, _, _ = toy_run
    synth = SynthConfig(n_volumes=1, shape=(128, 64, 64), seed=99)
    vol, _ = generate_volume(synth, 0)
    vol = preprocess(vol)
    peaks = []
    for depth in (8, 32, 128):
        from sliceprop.core import Volume

        sub = Volume(voxels=vol.voxels[:depth], spacing=vol.spacing, modality=vol.modality)
        stats = {}
        propagate_volume_auto(model, sub, stats=stats)
        peaks.append(stats.get("peak_state_bytes", 0))
    report(
        "carried state bytes identical across 8/32/128-slice volumes",
        len(set(peaks)) == 1,
        f"peaks {peaks}",
    )


def test_click_capacity_enforced():
    session = InteractionSession()
    point = torch.randn(8)
    for r in range(20):
        session.add_click(Click(slice_index=0, position=(0, 0), class_id=1, round=r + 1), point)
    try:
        session.add_click(Click(slice_index=0, position=(0, 0), class_id=1, round=21), point)
        rejected = False
    except ClickCapacityError:
        rejected = True
    report("21st click of one class rejected", rejected)
