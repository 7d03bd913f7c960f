import math

import numpy as np
import pytest

import oracles
from conftest import random_pair
from sthl.construction import coefficient_regularizer
from sthl.dataset import SamplePair
from sthl.model import (
    VARIANTS,
    ModelConfig,
    batch_loss,
    cross_entropy,
    forward,
    forward_batch,
    init_model,
    load_checkpoint,
    make_variant,
    pearson_adjacency,
    predict,
    propagation_matrix,
    read_checkpoint_meta,
    save_checkpoint,
    total_loss,
)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(N=3, d=5, C=2, K=2)
    with pytest.raises(ValueError):
        ModelConfig(N=1, d=4, C=2)
    with pytest.raises(ValueError):
        ModelConfig(N=3, d=4, C=2, alpha=1.5)


def test_init_is_seeded(tiny_config):
    a, b = init_model(tiny_config), init_model(tiny_config)
    for name in a.store:
        assert a.store[name].tobytes() == b.store[name].tobytes()
    other = init_model(ModelConfig(N=3, d=4, C=2, K=2, rng_seed=12))
    assert other.store["attention.q_lin"].tobytes() != a.store["attention.q_lin"].tobytes()


def test_init_selects_every_candidate(tiny_model, tiny_pair):
    np.testing.assert_allclose(tiny_model.store["construction.p_spa"], 0.5)
    np.testing.assert_allclose(tiny_model.store["construction.p_tem"], 1 / 3)
    _, _, snap = forward(tiny_model, tiny_pair)
    assert all(len(e.slaves) == (2 if e.kind == "spatial" else 3) for e in snap.edges)


@pytest.mark.parametrize("variant", VARIANTS)
def test_logits_shape_and_finite(tiny_config, tiny_pair, variant, backend):
    model = init_model(tiny_config, variant)
    logits, recon, _ = forward(model, tiny_pair)
    assert logits.shape == (tiny_config.C,) and np.all(np.isfinite(logits))
    assert math.isfinite(recon) and recon >= 0.0


def test_zero_features_leave_only_regulariser(tiny_model):
    zero = SamplePair(np.zeros((3, 4)), np.zeros((3, 4)), 0)
    _, recon, _ = forward(tiny_model, zero)
    cp = tiny_model.construction
    expected = coefficient_regularizer(cp.p_spa, cp.p_tem, tiny_model.config.gamma)
    assert recon == pytest.approx(expected, abs=1e-14)


def test_recon_matches_oracle(tiny_model, tiny_pair):
    cp = tiny_model.construction
    expected = oracles.recon_loss(tiny_pair.current.tolist(), tiny_pair.previous.tolist(),
                                  cp.theta_spa.tolist(), cp.theta_tem.tolist(),
                                  cp.p_spa.tolist(), cp.p_tem.tolist(),
                                  tiny_model.config.lam, tiny_model.config.gamma)
    assert forward(tiny_model, tiny_pair)[1] == pytest.approx(expected, abs=1e-12)


def test_logits_match_scalar_oracle(tiny_model, tiny_pair, backend, rng):
    # move coefficients off the uniform init so some entries are gated out
    s = tiny_model.store
    s["construction.p_spa"][...] = rng.standard_normal(s["construction.p_spa"].shape)
    s["construction.p_tem"][...] = rng.standard_normal(s["construction.p_tem"].shape)
    att = {k: s[f"attention.{k}"].tolist() for k in
           ("q_lin", "k_lin_spa", "k_lin_tem", "theta_att_spa", "theta_att_tem")}
    upd, cls = tiny_model.update_mlp, tiny_model.classifier
    expected = oracles.end_to_end_logits(
        tiny_pair.current.tolist(), tiny_pair.previous.tolist(),
        s["construction.p_spa"].tolist(), s["construction.p_tem"].tolist(), att,
        [w.tolist() for w in upd.weights], [b.tolist() for b in upd.biases],
        [w.tolist() for w in cls.weights], [b.tolist() for b in cls.biases])
    np.testing.assert_allclose(forward(tiny_model, tiny_pair)[0], expected, atol=1e-10)


def test_no_attention_is_mean_of_edge_embeddings(tiny_config, tiny_pair):
    model = init_model(tiny_config, "no_attention")
    _, _, cache = forward_batch(model, tiny_pair.current, tiny_pair.previous)
    np.testing.assert_allclose(cache["U"], 0.5 * (cache["e_spa"] + cache["e_tem"]))
    assert not any(n.startswith("attention.") for n in model.store)


def test_total_loss_cases():
    assert total_loss(np.zeros(5), 2, 0.0, alpha=0.0) == pytest.approx(math.log(5), abs=1e-12)
    assert total_loss(np.zeros(5), 2, 3.5, alpha=1.0) == 3.5
    logits = np.array([0.3, -1.2, 2.0])
    for alpha in (0.0, 0.1, 0.7, 1.0):
        ce = float(cross_entropy(logits, 1)[0])
        assert total_loss(logits, 1, 2.0, alpha) == pytest.approx(alpha * 2.0 + (1 - alpha) * ce)


def test_cross_entropy_extreme_logits():
    ce = cross_entropy(np.array([[1e3, -1e3], [-1e3, 1e3]]), np.array([1, 1]))
    assert np.all(np.isfinite(ce))
    assert ce[0] == pytest.approx(2e3) and ce[1] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_batch_reduction_is_mean(tiny_model, rng):
    pairs = [random_pair(rng, 3, 4, label=i % 2) for i in range(4)]
    per = [batch_loss(tiny_model, p.current, p.previous, [p.label]) for p in pairs]
    cur = np.stack([p.current for p in pairs])
    prev = np.stack([p.previous for p in pairs])
    assert batch_loss(tiny_model, cur, prev, [p.label for p in pairs]) == pytest.approx(
        np.mean(per), abs=1e-13)


def test_shape_mismatch_is_reported(tiny_model, rng):
    with pytest.raises(ValueError, match="N=4"):
        forward(tiny_model, random_pair(rng, 4, 4))


def test_pearson_adjacency_matches_oracle(rng):
    x = rng.standard_normal((4, 6))
    x[2] = 3.0  # constant channel
    A = pearson_adjacency(x)
    for i in range(4):
        for j in range(4):
            assert A[i, j] == pytest.approx(oracles.pearson(x[i].tolist(), x[j].tolist()),
                                            abs=1e-12)
    assert A[0, 0] == pytest.approx(1.0) and A[2, 2] == 0.0
    P = propagation_matrix(A)
    np.testing.assert_allclose(np.abs(P).sum(axis=1), 1.0)
    assert np.all(np.diag(P) > 0)


def test_variant_shares_heads(tiny_model):
    v = make_variant(tiny_model, "no_attention")
    for name in v.store:
        np.testing.assert_array_equal(v.store[name], tiny_model.store[name])
    assert v.store.num_parameters() < tiny_model.store.num_parameters()


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_round_trip(tmp_path, tiny_config, tiny_pair, variant):
    model = init_model(tiny_config, variant)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, extra={"config_hash": "abc"})
    back = load_checkpoint(path)
    assert back.variant == variant
    assert read_checkpoint_meta(path)[0]["config_hash"] == "abc"
    assert forward(back, tiny_pair)[0].tobytes() == forward(model, tiny_pair)[0].tobytes()


def test_checkpoint_rejects_garbage(tmp_path, tiny_model):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
    save_checkpoint(tiny_model, path)
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)


def test_predict_is_argmax(tiny_model, tiny_pair):
    logits, _, _ = forward(tiny_model, tiny_pair)
    assert predict(tiny_model, tiny_pair.current, tiny_pair.previous)[0] == np.argmax(logits)
