import math

import numpy as np
import pytest
import torch

from sliceprop.model import (
    CheckpointError,
    DecoderOutput,
    ModelConfig,
    NumericError,
    SegModel,
    kmeans_cross_attention,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_position_encoding,
    standard_cross_attention,
    upsample_mask_logits,
)

TINY = ModelConfig(d_model=8, n_decoder_layers=1, n_classes=2, per_class_centers=1, ffn_hidden=16, seed=0)


def tiny_model(dtype=torch.float64):
    model = SegModel(TINY).to(dtype)
    model.eval()
    return model


# --------------------------------------------------- attention primitives

def test_standard_attention_singleton_pixel():
    C = torch.zeros(2, 3)
    Q = torch.randn(2, 3)
    K = torch.randn(1, 3)
    V = torch.randn(1, 3)
    out = standard_cross_attention(C, Q, K, V)
    assert torch.allclose(out, C + V.expand(2, 3))


def test_standard_attention_zero_query_uniform():
    C = torch.zeros(2, 4)
    Q = torch.zeros(2, 4)
    K = torch.randn(5, 4)
    V = torch.randn(5, 4)
    out = standard_cross_attention(C, Q, K, V)
    assert torch.allclose(out, C + V.mean(dim=0).expand(2, 4), atol=1e-6)


def test_standard_attention_matches_loop_oracle():
    torch.manual_seed(0)
    N, HW, D = 3, 5, 4
    C, Q = torch.randn(N, D), torch.randn(N, D)
    K, V = torch.randn(HW, D), torch.randn(HW, D)
    out = standard_cross_attention(C, Q, K, V)
    for n in range(N):
        logits = torch.tensor([sum(Q[n, d] * K[p, d] for d in range(D)) for p in range(HW)])
        w = torch.exp(logits)
        w = w / w.sum()
        expected = C[n] + sum(w[p] * V[p] for p in range(HW))
        assert torch.allclose(out[n], expected, atol=1e-6)


def test_kmeans_attention_hand_case():
    # per-pixel argmax enumeration: pixel 0 -> center 0, pixel 1 -> center 1
    C = torch.zeros(2, 1)
    Q = torch.tensor([[1.0], [0.0]])
    K = torch.tensor([[2.0], [-1.0]])
    V = torch.tensor([[3.0], [5.0]])
    out, A = kmeans_cross_attention(C, Q, K, V)
    assert torch.equal(A, torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
    assert torch.equal(out, torch.tensor([[3.0], [5.0]]))


def test_kmeans_attention_single_center():
    torch.manual_seed(1)
    C = torch.randn(1, 4)
    Q = torch.randn(1, 4)
    K, V = torch.randn(6, 4), torch.randn(6, 4)
    out, A = kmeans_cross_attention(C, Q, K, V)
    assert torch.equal(A, torch.ones(1, 6))
    assert torch.allclose(out, C + V.sum(dim=0, keepdim=True))


def test_kmeans_attention_empty_centers_rejected():
    with pytest.raises(ValueError):
        kmeans_cross_attention(torch.zeros(0, 4), torch.zeros(0, 4),
                               torch.zeros(3, 4), torch.zeros(3, 4))


def test_kmeans_decomposition_identity():
    """One-shot form equals assignment-then-update, bit for bit."""
    torch.manual_seed(2)
    for _ in range(50):
        N, HW, D = 4, 9, 8
        C, Q = torch.randn(N, D), torch.randn(N, D)
        K, V = torch.randn(HW, D), torch.randn(HW, D)
        out, A = kmeans_cross_attention(C, Q, K, V)
        assignment_step = A @ V
        update_step = C + assignment_step
        assert torch.equal(out, update_step)


def test_kmeans_assignment_one_hot():
    torch.manual_seed(3)
    _, A = kmeans_cross_attention(
        torch.randn(5, 4), torch.randn(5, 4), torch.randn(12, 4), torch.randn(12, 4)
    )
    cols = A.sum(dim=0)
    assert torch.equal(cols, torch.ones(12))
    assert set(A.unique().tolist()) <= {0.0, 1.0}


def test_kmeans_tie_breaks_to_lowest_index():
    C = torch.zeros(3, 1)
    Q = torch.tensor([[1.0], [1.0], [1.0]])  # all centers tie on every pixel
    K = torch.tensor([[2.0], [0.5]])
    V = torch.ones(2, 1)
    _, A = kmeans_cross_attention(C, Q, K, V)
    assert torch.equal(A[0], torch.ones(2))
    assert not A[1:].any()


def test_kmeans_assignment_carries_no_gradient():
    C = torch.randn(2, 3, requires_grad=True)
    Q = C * 2.0
    K, V = torch.randn(4, 3), torch.randn(4, 3)
    out, A = kmeans_cross_attention(C, Q, K, V)
    assert A.grad_fn is None
    out.sum().backward()
    assert torch.allclose(C.grad, torch.ones_like(C))  # only the residual path


# --------------------------------------------------------------- encoder

def test_positional_encoding_shape_and_range():
    pe = sinusoidal_position_encoding(8, 5, 7)
    assert pe.shape == (8, 5, 7)
    assert pe.abs().max() <= 1.0


def test_encode_zero_slice_zero_params_gives_positional_only():
    model = tiny_model()
    with torch.no_grad():
        for p in model.encoder.parameters():
            p.zero_()
        for p in model.pixel_proj.parameters():
            p.zero_()
    feats, pix = model.encode_slice(torch.zeros(16, 16, dtype=torch.float64))
    pe = sinusoidal_position_encoding(8, 4, 4, dtype=torch.float64)
    assert torch.allclose(feats, pe)
    assert not pix.any()


def test_encode_deterministic():
    model = tiny_model()
    x = torch.rand(16, 16, dtype=torch.float64) * 255
    f1, p1 = model.encode_slice(x)
    f2, p2 = model.encode_slice(x)
    assert torch.equal(f1, f2) and torch.equal(p1, p2)


@pytest.mark.parametrize("h,w", [(16, 16), (17, 19), (9, 33)])
def test_encode_shape_contract(h, w):
    model = tiny_model()
    f, p = model.encode_slice(torch.rand(h, w, dtype=torch.float64) * 255)
    expected = (8, math.ceil(h / 4), math.ceil(w / 4))
    assert f.shape == expected and p.shape == expected
    assert torch.all(torch.isfinite(f))


def test_encode_rejects_nonfinite():
    model = tiny_model()
    bad = torch.zeros(16, 16, dtype=torch.float64)
    bad[0, 0] = float("nan")
    with pytest.raises(NumericError):
        model.encode_slice(bad)


# ---------------------------------------------------------------- decoder

def test_decode_zero_heads():
    model = tiny_model()
    with torch.no_grad():
        for p in model.mask_head.parameters():
            p.zero_()
        for p in model.class_head.parameters():
            p.zero_()
    out = model(torch.rand(16, 16, dtype=torch.float64) * 255)
    assert not out.mask_logits.any()
    probs = torch.softmax(out.class_logits, dim=-1)
    assert torch.allclose(probs, torch.full_like(probs, 1.0 / 3.0))


def test_decode_deterministic():
    model = tiny_model()
    x = torch.rand(16, 16, dtype=torch.float64) * 255
    a, b = model(x), model(x)
    assert torch.equal(a.mask_logits, b.mask_logits)
    assert torch.equal(a.class_logits, b.class_logits)
    assert torch.equal(a.centers, b.centers)


def test_decode_output_shapes():
    cfg = ModelConfig(d_model=16, n_decoder_layers=2, n_classes=3, per_class_centers=2, seed=1)
    model = SegModel(cfg).eval()
    out = model(torch.rand(20, 24) * 255)
    n = cfg.n_centers
    assert out.centers.shape == (n, 16)
    assert out.mask_logits.shape == (n, 5, 6)
    assert out.class_logits.shape == (n, 4)
    assert len(out.per_layer_aux) == 2
    assert len(out.per_layer_assignments) == 2


def test_assignment_one_hot_every_layer():
    cfg = ModelConfig(d_model=16, n_decoder_layers=3, n_classes=2, per_class_centers=2, seed=2)
    model = SegModel(cfg).eval()
    out = model(torch.rand(16, 16) * 255)
    for A in out.per_layer_assignments:
        assert torch.equal(A.sum(dim=0), torch.ones(A.shape[1]))


def test_permutation_equivariance():
    model = tiny_model()
    x = torch.rand(16, 16, dtype=torch.float64) * 255
    feats, pix = model.encode_slice(x)
    centers = torch.randn(4, 8, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    a = model.decode(feats, pix, centers)
    b = model.decode(feats, pix, centers[perm])
    # permuting tokens reorders softmax reductions, so allow ulp-level drift
    assert torch.allclose(a.centers[perm], b.centers, atol=1e-12, rtol=0)
    assert torch.allclose(a.mask_logits[perm], b.mask_logits, atol=1e-12, rtol=0)
    assert torch.allclose(a.class_logits[perm], b.class_logits, atol=1e-12, rtol=0)


def test_upsample_mask_logits_shape():
    up = upsample_mask_logits(torch.randn(3, 4, 4), (16, 16))
    assert up.shape == (3, 16, 16)


# --------------------------------------------------------- gradient check

def central_difference_grads(params, loss_fn, h=1e-5, max_coords=6):
    """Central finite differences on a sampled subset of each tensor's coords."""
    rng = np.random.default_rng(0)
    checks = []
    for p in params:
        flat = p.detach().reshape(-1)
        n = flat.numel()
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for c in coords:
            orig = flat[c].item()
            flat[c] = orig + h
            lp = loss_fn().item()
            flat[c] = orig - h
            lm = loss_fn().item()
            flat[c] = orig
            checks.append((p, int(c), (lp - lm) / (2 * h)))
    return checks


def assert_grads_match(params, loss_fn, rtol=1e-3):
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    for p, c, fd in central_difference_grads(params, loss_fn):
        if p.grad is None:
            # parameter not on this loss's path; finite differences must agree
            assert abs(fd) < 1e-6
            continue
        analytic = p.grad.reshape(-1)[c].item()
        denom = max(abs(fd), abs(analytic), 1e-4)
        assert abs(analytic - fd) / denom < rtol, f"grad mismatch: {analytic} vs {fd}"


def test_decoder_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = tiny_model()
    x = torch.rand(16, 16, dtype=torch.float64) * 255
    gt = (torch.rand(2, 4, 4, dtype=torch.float64) > 0.5).double()

    def loss_fn():
        out = model(x)
        return (
            torch.sigmoid(out.mask_logits).mul(gt[: out.mask_logits.shape[0]]).sum()
            + out.class_logits.square().sum() * 0.1
            + out.centers.square().sum() * 0.01
        )

    params = [p for p in model.parameters() if p.requires_grad]
    assert_grads_match(params, loss_fn)


def test_click_ffn_gradients_match_finite_differences():
    torch.manual_seed(1)
    model = tiny_model()
    o = torch.randn(8, dtype=torch.float64)

    def loss_fn():
        return model.click_ffn(o).square().sum()

    assert_grads_match(list(model.click_ffn.parameters()), loss_fn)


# ------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(d_model=16, n_decoder_layers=1, n_classes=2, per_class_centers=2, seed=5)
    model = SegModel(cfg).eval()
    save_checkpoint(model, tmp_path / "ckpt.zip", iteration=42)
    loaded, header = load_checkpoint(tmp_path / "ckpt.zip")
    assert header["iteration"] == 42
    x = torch.rand(16, 16) * 255
    a, b = model(x), loaded(x)
    assert torch.allclose(a.mask_logits, b.mask_logits, atol=1e-6)


def test_checkpoint_shape_mismatch_fails(tmp_path):
    model = SegModel(ModelConfig(d_model=16, n_decoder_layers=1, n_classes=2,
                                 per_class_centers=2, seed=5)).eval()
    save_checkpoint(model, tmp_path / "ckpt.zip")
    import json
    import zipfile

    # tamper with the header so the rebuilt model disagrees with stored shapes
    with zipfile.ZipFile(tmp_path / "ckpt.zip") as zf:
        names = zf.namelist()
        header = json.loads(zf.read("header.json"))
        blobs = {n: zf.read(n) for n in names if n != "header.json"}
    header["config"]["d_model"] = 32
    with zipfile.ZipFile(tmp_path / "bad.zip", "w") as zf:
        zf.writestr("header.json", json.dumps(header))
        for n, b in blobs.items():
            zf.writestr(n, b)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.zip")


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.zip")
