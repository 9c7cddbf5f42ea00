import dataclasses

import numpy as np
import pytest

from interproto.core_math import finite_diff_grad, max_relative_error
from interproto.data import Dataset, SyntheticSpec, generate_synthetic
from interproto.encoder import (
    EncoderParams,
    Layer,
    TrainConfig,
    TrainingError,
    encode_backward,
    encode_forward,
    init_encoder,
    init_prototypes,
    load_checkpoint,
    mean_offdiag_abs_cos,
    save_checkpoint,
    sgd_step,
    train,
)
from interproto.losses import MarginConfig, inter_prototype_loss, total_loss


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(SyntheticSpec(n_identities=12, child_fraction=0.5, adult_samples=6, d_in=10))


def test_identity_layer_passthrough(rng):
    params = EncoderParams([Layer(np.eye(5), np.zeros(5), relu=False)])
    x = rng.normal(size=(5, 3))
    out, _ = encode_forward(params, x)
    np.testing.assert_array_equal(out, x)


def test_zero_weights_give_bias(rng):
    b = np.array([0.5, -1.0, 2.0])
    params = EncoderParams([Layer(np.zeros((3, 4)), b, relu=False)])
    out, _ = encode_forward(params, rng.normal(size=(4, 6)))
    assert np.all(out == b[:, None])


def test_shape_mismatch():
    params = init_encoder(4, [8], 3, seed=0)
    with pytest.raises(ValueError):
        encode_forward(params, np.ones((5, 2)))
    with pytest.raises(ValueError):
        EncoderParams([Layer(np.ones((3, 4)), np.zeros(3), True), Layer(np.ones((2, 5)), np.zeros(2), False)])


def test_jvp_matches_finite_difference(rng):
    params = init_encoder(6, [10], 4, seed=1)
    x = rng.normal(size=(6, 5))
    probe = rng.normal(size=(4, 5))
    out, cache = encode_forward(params, x)
    grads = encode_backward(cache, probe)

    def scalar(w):
        p = params.replace({**params.named_arrays(), "layer0.weight": w})
        return float(np.sum(probe * encode_forward(p, x)[0]))

    fd = finite_diff_grad(scalar, params.layers[0].weight)
    assert max_relative_error(grads["layer0.weight"], fd) <= 1e-4
    direction = rng.normal(size=params.layers[1].weight.shape)
    eps = 1e-6
    p_plus = params.replace({**params.named_arrays(), "layer1.weight": params.layers[1].weight + eps * direction})
    p_minus = params.replace({**params.named_arrays(), "layer1.weight": params.layers[1].weight - eps * direction})
    jvp_fd = (np.sum(probe * encode_forward(p_plus, x)[0]) - np.sum(probe * encode_forward(p_minus, x)[0])) / (2 * eps)
    assert np.sum(grads["layer1.weight"] * direction) == pytest.approx(jvp_fd, rel=1e-4)


def test_zero_upstream_gives_zero_grads(rng):
    params = init_encoder(6, [10], 4, seed=1)
    _, cache = encode_forward(params, rng.normal(size=(6, 5)))
    grads = encode_backward(cache, np.zeros((4, 5)))
    assert all(np.all(g == 0) for g in grads.values())


def test_linear_least_squares_gradient(rng):
    A = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    params = EncoderParams([Layer(A, b, relu=False)])
    X = rng.normal(size=(4, 7))
    Y = rng.normal(size=(3, 7))
    out, cache = encode_forward(params, X)
    # loss = 0.5 * ||A X + b - Y||^2
    grads = encode_backward(cache, out - Y)
    R = A @ X + b[:, None] - Y
    np.testing.assert_allclose(grads["layer0.weight"], R @ X.T, atol=1e-10)
    np.testing.assert_allclose(grads["layer0.bias"], R.sum(axis=1), atol=1e-10)


def test_stale_cache_rejected(rng):
    params = init_encoder(6, [10], 4, seed=1)
    _, cache = encode_forward(params, rng.normal(size=(6, 5)))
    with pytest.raises(ValueError):
        encode_backward(cache, np.zeros((4, 3)))


def test_full_pipeline_fd_every_parameter(rng):
    params = init_encoder(5, [7], 4, seed=3)
    W = rng.normal(size=(4, 6))
    x = rng.normal(size=(5, 4))
    y = np.array([0, 1, 2, 4])
    cfg = MarginConfig(kind="arcface", scale=64.0, margin=0.5, lambda_ip=1.0)
    child = [1, 3, 4]

    def loss_with(arrays, protos):
        feats, _ = encode_forward(params.replace(arrays), x)
        return total_loss(feats, protos, y, child, cfg).loss

    feats, cache = encode_forward(params, x)
    res = total_loss(feats, W, y, child, cfg)
    grads = encode_backward(cache, res.grad_features)
    arrays = params.named_arrays()
    for name, value in arrays.items():
        fd = finite_diff_grad(lambda v: loss_with({**arrays, name: v}, W), value)
        assert max_relative_error(grads[name], fd) <= 1e-4, name
    fd = finite_diff_grad(lambda v: loss_with(arrays, v), W)
    assert max_relative_error(res.grad_prototypes, fd) <= 1e-4


def _scalar_cfg(**kw):
    return TrainConfig(**{"momentum": 0.0, "weight_decay": 0.0, "lr": 0.1, **kw})


def _one_param(p):
    return EncoderParams([Layer(np.array([[p]]), np.zeros(1), relu=False)])


def test_sgd_plain_step():
    cfg = _scalar_cfg()
    grads = {"layer0.weight": np.array([[2.0]]), "layer0.bias": np.zeros(1), "prototypes": np.zeros((1, 1))}
    params, protos, _ = sgd_step(_one_param(1.0), np.ones((1, 1)), grads, {}, cfg)
    assert params.layers[0].weight[0, 0] == pytest.approx(0.8, abs=1e-15)
    assert protos[0, 0] == 1.0


def test_sgd_zero_grad_no_decay_keeps_params(rng):
    params = init_encoder(3, [4], 2, seed=0)
    W = rng.normal(size=(2, 3))
    grads = {k: np.zeros_like(v) for k, v in params.named_arrays().items()}
    grads["prototypes"] = np.zeros_like(W)
    new, W2, _ = sgd_step(params, W, grads, {}, TrainConfig(weight_decay=0.0))
    for k, v in params.named_arrays().items():
        assert np.array_equal(v, new.named_arrays()[k])
    assert np.array_equal(W, W2)


def test_sgd_momentum_unrolled():
    # f(p) = 0.5 * a * p^2 with momentum 0.9 and weight decay
    a, lr, mu, wd = 3.0, 0.05, 0.9, 0.01
    cfg = TrainConfig(lr=lr, momentum=mu, weight_decay=wd)
    params, W, state = _one_param(2.0), np.ones((1, 1)), {}
    for _ in range(3):
        p = params.layers[0].weight
        grads = {"layer0.weight": a * p, "layer0.bias": np.zeros(1), "prototypes": np.zeros((1, 1))}
        params, W, state = sgd_step(params, W, grads, state, cfg)
    p, v = 2.0, 0.0
    for _ in range(3):
        v = mu * v + a * p + wd * p
        p = p - lr * v
    assert params.layers[0].weight[0, 0] == pytest.approx(p, abs=1e-12)


def test_sgd_bias_not_decayed():
    cfg = TrainConfig(lr=1.0, momentum=0.0, weight_decay=0.5)
    params = EncoderParams([Layer(np.array([[1.0]]), np.array([1.0]), relu=False)])
    grads = {"layer0.weight": np.zeros((1, 1)), "layer0.bias": np.zeros(1), "prototypes": np.zeros((1, 1))}
    new, W, _ = sgd_step(params, np.ones((1, 1)), grads, {}, cfg)
    assert new.layers[0].weight[0, 0] == 0.5
    assert new.layers[0].bias[0] == 1.0
    assert W[0, 0] == 0.5


def test_sgd_nonfinite_names_tensor():
    grads = {"layer0.weight": np.array([[np.nan]]), "layer0.bias": np.zeros(1), "prototypes": np.zeros((1, 1))}
    with pytest.raises(TrainingError, match="layer0.weight"):
        sgd_step(_one_param(1.0), np.ones((1, 1)), grads, {}, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_factor=0.0)
    with pytest.raises(ValueError):
        TrainConfig(apply_ip_to="adults")


def test_lr_schedule():
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in (1, 16, 17, 24, 25, 30)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])


def test_zero_lr_leaves_parameters(small_data):
    cfg = TrainConfig(epochs=1, lr=0.0, batch_size=16, seed=4)
    params, head, ledger = train(small_data, cfg)
    ref = init_encoder(small_data.dim, [64], 16, 4)
    for k, v in ref.named_arrays().items():
        assert np.array_equal(v, params.named_arrays()[k])
    assert np.array_equal(head.W, init_prototypes(16, small_data.n_identities, 4))
    assert len(ledger.records) == 1


def test_same_seed_same_ledger(small_data):
    cfg = TrainConfig(epochs=3, batch_size=16, seed=9)
    a = train(small_data, cfg)[2]
    b = train(small_data, cfg)[2]
    assert a.lines() == b.lines()
    c = train(small_data, dataclasses.replace(cfg, seed=10))[2]
    assert a.lines()[1:] != c.lines()[1:]


def test_ledger_metric_matches_prototypes(small_data):
    params, head, ledger = train(small_data, TrainConfig(epochs=4, batch_size=16))
    ids = small_data.child_ids()
    u = head.W[:, ids] / np.linalg.norm(head.W[:, ids], axis=0)
    c = np.abs(u.T @ u)
    k = len(ids)
    independent = (c.sum() - np.trace(c)) / (k * (k - 1))
    assert ledger.records[-1]["child_mean_abs_cos"] == pytest.approx(independent, abs=1e-10)


def test_train_preconditions():
    lone = generate_synthetic(SyntheticSpec(n_identities=10, child_fraction=0.2))
    keep = ~(lone.child_mask & (lone.identities == lone.child_ids()[0]))
    reduced = Dataset(lone.identities[keep], lone.age_groups[keep], lone.age_years[keep],
                      lone.features[keep], lone.n_identities)
    assert len(reduced.child_ids()) == 1
    with pytest.raises(ValueError, match="Inter-Prototype"):
        train(reduced, TrainConfig(epochs=1))
    train(reduced, TrainConfig(epochs=1, apply_ip_to="off"))


def test_ip_step_decreases_ip_on_frozen_encoder(small_data):
    params = init_encoder(small_data.dim, [64], 16, 0)
    W = init_prototypes(16, small_data.n_identities, 0)
    ids = small_data.child_ids()
    cfg = MarginConfig(lambda_ip=50.0)
    tcfg = TrainConfig(lr=1e-3, momentum=0.0, weight_decay=0.0)
    x = small_data.inputs[:, :16]
    y = small_data.identities[:16]
    before = inter_prototype_loss(W, ids).loss
    feats, cache = encode_forward(params, x)
    res = total_loss(feats, W, y, ids, cfg)
    grads = {k: np.zeros_like(v) for k, v in params.named_arrays().items()}
    grads["prototypes"] = res.grad_prototypes
    _, W2, _ = sgd_step(params, W, grads, {}, tcfg)
    assert inter_prototype_loss(W2, ids).loss < before


def test_checkpoint_round_trip(tmp_path, small_data):
    params, head, _ = train(small_data, TrainConfig(epochs=2, batch_size=16))
    path = tmp_path / "ck.json"
    save_checkpoint(path, params, head, "abc")
    p2, h2, digest = load_checkpoint(path)
    assert digest == "abc"
    for k, v in params.named_arrays().items():
        assert np.array_equal(v, p2.named_arrays()[k])
    assert np.array_equal(head.W, h2.W)
    assert np.array_equal(head.child_ids, h2.child_ids)
    save_checkpoint(tmp_path / "again.json", p2, h2, "abc")
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()


def test_mean_offdiag_abs_cos():
    W = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    assert mean_offdiag_abs_cos(W, [0, 1]) == 0.0
    assert mean_offdiag_abs_cos(W, [0, 2]) == pytest.approx(np.sqrt(0.5))


@pytest.mark.slow
def test_ip_lowers_child_similarity_each_seed():
    ds = generate_synthetic(SyntheticSpec())
    for seed in range(3):
        base = train(ds, TrainConfig(seed=seed, margin=MarginConfig(lambda_ip=0.0), apply_ip_to="off"))[2]
        ip = train(ds, TrainConfig(seed=seed, margin=MarginConfig(lambda_ip=1.0)))[2]
        assert ip.final["child_mean_abs_cos"] < base.final["child_mean_abs_cos"]
        assert all(r["min_prototype_norm"] > 1e-6 for r in ip.records)
