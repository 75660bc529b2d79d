import csv
import math

import numpy as np
import pytest

from sima import model as M
from sima.attention import AttentionConfig, AttentionWeights, Variant, attention_scores
from sima.cost import counting
from sima.tensor import Rng, ShapeError


def small_cfg(**kw):
    base = dict(depth=1, dim=8, heads=2, patch_grid=2, d_in=4)
    base.update(kw)
    return M.ModelConfig(**base)


def random_params(cfg, seed, scale=0.5):
    rng = Rng(seed)
    return {k: rng.child(i).normal(v.shape, scale) + (1.0 if k.endswith("gain") else 0.0)
            for i, (k, v) in enumerate(M.init_params(cfg, Rng(0)).items())}


# --- ffn ----------------------------------------------------------------------


def test_ffn_zero_weights():
    x = Rng(0).normal((5, 3))
    out = M.ffn_forward(x, np.zeros((3, 12)), np.zeros(12), np.zeros((12, 3)), np.zeros(3))
    assert np.all(out == 0)


def test_ffn_hand_case_d1():
    w1, b1 = np.array([[1.0, -1.0, 2.0, 0.5]]), np.array([0.0, 1.0, -1.0, 0.0])
    w2, b2 = np.array([[1.0], [2.0], [3.0], [-4.0]]), np.array([0.5])
    x = np.array([[2.0], [-1.0]])
    # relu hidden for x=2: [2, 0, 3, 1] -> 2 + 0 + 9 - 4 + 0.5
    # relu hidden for x=-1: [0, 2, 0, 0] -> 4 + 0.5
    out = M.ffn_forward(x, w1, b1, w2, b2, "relu")
    assert out.tolist() == [[7.5], [4.5]]
    gelu = M.ffn_forward(np.array([[1.0]]), np.array([[1.0, 0, 0, 0]]), np.zeros(4),
                         np.array([[1.0], [0], [0], [0]]), np.zeros(1), "gelu")
    assert gelu[0, 0] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-3)


def test_ffn_relu_counts_no_exp_and_shape_error():
    rng = Rng(1)
    with counting() as report:
        M.ffn_forward(rng.normal((4, 3)), rng.normal((3, 12)), np.zeros(12), rng.normal((12, 3)), np.zeros(3),
                      "relu")
    assert report.exp_ops == 0
    with pytest.raises(ShapeError):
        M.ffn_forward(np.zeros((4, 3)), np.zeros((2, 12)), np.zeros(12), np.zeros((12, 3)), np.zeros(3))


# --- block --------------------------------------------------------------------


@pytest.mark.parametrize("variant", list(Variant))
def test_block_residual_identity(variant):
    cfg = small_cfg(variant=variant)
    p = {k: np.zeros_like(v) for k, v in M.block_params(M.init_params(cfg, Rng(0)), 0).items()}
    x = Rng(2).normal((5, 8))
    with np.errstate(all="ignore"):
        out = M.block_forward(x, p, cfg)
    np.testing.assert_array_equal(out, x)


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def straight_line_block(x, p, heads):
    n, d = x.shape
    hd = d // heads
    h = _ln(x, p["norm1.gain"], p["norm1.bias"])
    qkv = h @ p["attn.qkv.w"]
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    q = q / np.maximum(np.abs(q).sum(axis=0), 1e-6)
    k = k / np.maximum(np.abs(k).sum(axis=0), 1e-6)
    heads_out = []
    for i in range(heads):
        c = slice(i * hd, (i + 1) * hd)
        heads_out.append((q[:, c] @ k[:, c].T) @ v[:, c])
    x = x + np.concatenate(heads_out, axis=1) @ p["attn.proj.w"] + p["attn.proj.b"]
    h = _ln(x, p["norm2.gain"], p["norm2.bias"])
    u = h @ p["ffn.fc1.w"] + p["ffn.fc1.b"]
    u = 0.5 * u * (1 + np.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u ** 3)))
    return x + u @ p["ffn.fc2.w"] + p["ffn.fc2.b"]


def test_block_matches_straight_line_oracle():
    cfg = small_cfg()
    p = M.block_params(random_params(cfg, 3), 0)
    x = Rng(4).normal((5, 8))
    np.testing.assert_allclose(M.block_forward(x, p, cfg), straight_line_block(x, p, 2), rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", list(Variant))
def test_block_permutation_equivariance(variant):
    cfg = small_cfg(variant=variant)
    p = M.block_params(random_params(cfg, 5, scale=0.3), 0)
    rng = Rng(6)
    x = rng.normal((9, 8))
    base = M.block_forward(x, p, cfg)
    for _ in range(5):
        perm = rng.permutation(9)
        np.testing.assert_allclose(M.block_forward(x[perm], p, cfg), base[perm], rtol=0, atol=1e-12)


def test_block_shape_error():
    cfg = small_cfg()
    with pytest.raises(ShapeError):
        M.block_forward(np.zeros((5, 6)), M.block_params(M.init_params(cfg, Rng(0)), 0), cfg)


# --- classifier ---------------------------------------------------------------


@pytest.mark.parametrize("pooling", ["mean", "cls"])
def test_zero_params_zero_logits(pooling):
    cfg = small_cfg(pooling=pooling)
    p = {k: np.zeros_like(v) for k, v in M.init_params(cfg, Rng(0)).items()}
    with np.errstate(all="ignore"):
        logits = M.classifier_forward(Rng(1).normal((4, 4)), cfg, p)
    assert logits.shape == (2,)
    assert np.all(logits == 0)


@pytest.mark.parametrize("variant", list(Variant))
def test_mean_pool_permutation_invariance(variant):
    cfg = small_cfg(variant=variant, depth=2, patch_grid=3)
    p = random_params(cfg, 7, scale=0.3)
    rng = Rng(8)
    tokens = rng.normal((9, 4))
    base = M.classifier_forward(tokens, cfg, p)
    for _ in range(5):
        np.testing.assert_allclose(M.classifier_forward(tokens[rng.permutation(9)], cfg, p), base,
                                   rtol=0, atol=1e-12)


def test_default_init_logits_finite_and_batched():
    cfg = M.ModelConfig()
    p = M.init_params(cfg, Rng(0))
    p["head.w"] = Rng(1).normal(p["head.w"].shape)
    tokens = Rng(2).normal((3, 16, 16))
    batched = M.classifier_forward(tokens, cfg, p)
    assert batched.shape == (3, 2) and np.all(np.isfinite(batched))
    np.testing.assert_allclose(M.classifier_forward(tokens[1], cfg, p), batched[1], rtol=0, atol=1e-12)


def test_classifier_token_count_error():
    cfg = small_cfg()
    with pytest.raises(ShapeError, match="2x2"):
        M.classifier_forward(np.zeros((5, 4)), cfg, M.init_params(cfg, Rng(0)))


def test_relu_sima_classifier_is_exp_free():
    cfg = M.ModelConfig(activation="relu", variant="sima", pooling="cls")
    p = random_params(cfg, 9, scale=0.1)
    with counting() as report:
        M.classifier_forward(Rng(3).normal((4, 16, 16)), cfg, p)
    assert report.exp_ops == 0
    assert report.mul_adds > 0


def test_config_validation():
    with pytest.raises(M.ConfigError):
        M.ModelConfig(depth=0)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(dim=10, heads=4)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(ffn_ratio=0)
    cfg = M.ModelConfig(pooling="cls", normalization="none")
    assert cfg.n_tokens == 17
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


# --- data ---------------------------------------------------------------------


def test_dataset_determinism_and_balance():
    a = M.make_synthetic_dataset(Rng(0), 64, 4, 16, 3.0)
    b = M.make_synthetic_dataset(Rng(0), 64, 4, 16, 3.0)
    assert a.tokens.tobytes() == b.tokens.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert a.labels.sum() == 32
    assert np.linalg.norm(a.direction) == pytest.approx(1.0)


def test_dataset_signal_zero_is_pure_noise():
    ds = M.make_synthetic_dataset(Rng(1), 32, 4, 16, 0.0)
    rebuilt = np.stack([Rng(1).child(1, i).normal((16, 16)) for i in range(32)])
    np.testing.assert_array_equal(ds.tokens, rebuilt)
    with pytest.raises(ValueError):
        M.make_synthetic_dataset(Rng(1), 4, 2, 4, -1.0)


def test_dot_product_detector_beats_ninety_percent():
    ds = M.make_synthetic_dataset(Rng(2), 1024, 4, 16, 3.0)
    score = (ds.tokens @ ds.direction).max(axis=1)  # strongest projection per sample
    fit, held = slice(0, 512), slice(512, None)
    candidates = np.sort(score[fit])
    acc = [((score[fit] > t) == ds.labels[fit]).mean() for t in candidates]
    threshold = candidates[int(np.argmax(acc))]
    held_acc = ((score[held] > threshold) == ds.labels[held]).mean()
    assert held_acc > 0.9


# --- training -----------------------------------------------------------------


def test_lr_zero_keeps_params_and_loss():
    cfg = small_cfg()
    ds = M.make_synthetic_dataset(Rng(3), 16, 2, 4, 3.0)
    result = M.train_toy(cfg, ds, steps=5, lr=0.0, batch_size=None)
    losses = [row.loss for row in result.trace]
    assert losses == [losses[0]] * 5
    assert losses[0] == pytest.approx(math.log(2))
    initial = M.init_params(cfg, Rng(0).child(0))
    for k, v in result.state.params.items():
        np.testing.assert_array_equal(v, initial[k])


def test_training_is_deterministic_and_learns():
    cfg = small_cfg(patch_grid=2, d_in=4)
    ds = M.make_synthetic_dataset(Rng(4), 64, 2, 4, 3.0)
    a = M.train_toy(cfg, ds, steps=30, lr=1e-2, batch_size=16, seed=5)
    b = M.train_toy(cfg, ds, steps=30, lr=1e-2, batch_size=16, seed=5)
    assert [r.loss for r in a.trace] == [r.loss for r in b.trace]
    assert a.trace[-1].loss < a.trace[0].loss
    assert [r.step for r in a.trace] == list(range(1, 31))
    for k in a.state.params:
        assert a.state.params[k].shape == a.state.m[k].shape == a.state.v[k].shape


def test_training_diverged_carries_step(monkeypatch):
    cfg = small_cfg()
    ds = M.make_synthetic_dataset(Rng(0), 8, 2, 4, 3.0)
    real = M.loss_and_grads
    calls = []

    def flaky(*args):
        calls.append(1)
        loss, logits, grads = real(*args)
        return (float("nan") if len(calls) == 3 else loss), logits, grads

    monkeypatch.setattr(M, "loss_and_grads", flaky)
    with pytest.raises(M.TrainingDiverged) as info:
        M.train_toy(cfg, ds, steps=10, lr=1e-3)
    assert info.value.step == 3
    assert len(info.value.trace) == 2
    with pytest.raises(ValueError):
        M.train_toy(cfg, ds, steps=0, lr=1e-3)


def test_unnormalized_scores_blow_up_with_input_scale():
    base = AttentionConfig(32, 4, Variant.SIMA)
    w = AttentionWeights.init(base, Rng(0))  # std 0.02, as at step 0
    x = Rng(1).normal((16, 32))
    none_cfg = AttentionConfig(32, 4, Variant.SIMA, normalization="none")
    l1_scale = np.abs(attention_scores(100 * x, base, w)).max()
    none_scale = np.abs(attention_scores(100 * x, none_cfg, w)).max()
    assert none_scale >= 100 * l1_scale
    # the l1 scores do not move at all; the unnormalized ones grow by c^2
    np.testing.assert_allclose(attention_scores(100 * x, base, w), attention_scores(x, base, w), atol=1e-12)
    np.testing.assert_allclose(attention_scores(100 * x, none_cfg, w), 1e4 * attention_scores(x, none_cfg, w),
                               rtol=1e-12)


def test_model_gradients_match_finite_differences():
    from sima.checks import model_gradient_error

    cfg = small_cfg(pooling="cls", activation="relu", variant="msa")
    errors = model_gradient_error(cfg, seed=1)
    assert max(errors.values()) < 1e-4


# --- files --------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg(pooling="cls", normalization="l2", activation="relu")
    params = random_params(cfg, 10)
    path = tmp_path / "ckpt.npz"
    M.save_checkpoint(path, params, cfg)
    cfg2, params2 = M.load_checkpoint(path)
    assert cfg2 == cfg
    assert set(params2) == set(params)
    for k in params:
        np.testing.assert_array_equal(params2[k], params[k])


def test_checkpoint_errors(tmp_path):
    cfg = small_cfg()
    params = M.init_params(cfg, Rng(0))
    path = tmp_path / "bad.npz"
    np.savez(path, **params)
    with pytest.raises(M.CheckpointError, match="__config__"):
        M.load_checkpoint(path)
    del params["head.w"]
    M.save_checkpoint(path, params, cfg)
    with pytest.raises(M.CheckpointError, match="head.w"):
        M.load_checkpoint(path)
    with pytest.raises(OSError):
        M.load_checkpoint(tmp_path / "missing.npz")


def test_trace_csv(tmp_path):
    path = tmp_path / "trace.csv"
    M.write_trace_csv([M.TraceRow(1, 0.5, 0.25), M.TraceRow(2, 0.125, 1.0)], path)
    rows = list(csv.reader(open(path)))
    assert rows == [["step", "loss", "accuracy"], ["1", "0.5", "0.25"], ["2", "0.125", "1"]]
