import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from abbrmlm.errors import NumericError, TrainingDivergedError
from abbrmlm.masking import MaskingConfig, build_batch
from abbrmlm.model import (
    MaskedLM,
    ModelConfig,
    MoELayer,
    TrainConfig,
    build_model,
    compute_gradients,
    densify_to_moe,
    desk_config,
    mlm_loss,
    moe_forward,
    train,
)
from abbrmlm.model.objective import forward
from abbrmlm.tokenizer import CLS_ID, SEP_ID


def tiny_config(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16,
                max_position=64, moe_plan={1: (2, 1)})
    base.update(kw)
    return ModelConfig(**base)


def moe_2d(seed=0, n_exp=3, k=2):
    torch.manual_seed(seed)
    layer = MoELayer(2, 3, n_exp, k).double()
    with torch.no_grad():
        for p in layer.parameters():
            p.normal_(0, 1.0)
    return layer


@pytest.fixture
def batch(table, toy_sentences, toy_vocab):
    return build_batch(toy_sentences[:6], MaskingConfig(mask_prob=0.3, seed=1), table, toy_vocab)


def test_moe_matches_hand_oracle():
    layer = moe_2d()
    x = torch.randn(7, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    out = moe_forward(layer, x).detach().numpy()
    experts = [oracles.ffn_params(e) for e in layer.experts]
    shared = oracles.ffn_params(layer.shared_expert)
    router = layer.router.weight.detach().numpy()
    combine = layer.combine_logits.detach().numpy()
    for i in range(len(x)):
        want = oracles.moe_token(x[i].numpy(), router, experts, shared, combine, layer.top_k)
        np.testing.assert_allclose(out[i], want, atol=1e-6, rtol=0)


def test_mixing_weights_sum_to_one(rng):
    layer = MoELayer(2, 3, 2, 1)
    for a, b in rng.normal(0, 20, size=(10_000, 2)):
        with torch.no_grad():
            layer.combine_logits.copy_(torch.tensor([a, b]))
        alpha, beta = (t.detach() for t in layer.mixing_weights())
        assert abs(float(alpha + beta) - 1.0) < 1e-6
        assert 0 <= float(alpha) <= 1 and 0 <= float(beta) <= 1


def test_router_simplex_and_topk():
    layer = moe_2d(seed=3, n_exp=5, k=2)
    x = torch.randn(200, 2, dtype=torch.float64)
    w, top_w, top_i = layer.route(x)
    assert torch.allclose(w.sum(-1), torch.ones(200, dtype=torch.float64), atol=1e-5)
    assert top_i.shape == (200, 2)
    assert (top_i[:, 0] != top_i[:, 1]).all()
    # The chosen weights are the top-k of W, not renormalised.
    assert torch.equal(top_w, torch.gather(w, 1, top_i))
    assert (top_w[:, 0] >= top_w[:, 1]).all()


def test_only_selected_experts_contribute():
    layer = moe_2d(seed=5, n_exp=4, k=1)
    x = torch.randn(50, 2, dtype=torch.float64)
    _, _, top_i = layer.route(x)
    before = layer(x).detach()
    with torch.no_grad():
        for e in range(4):
            # Perturb each expert; only rows routed to it may change.
            saved = [p.clone() for p in layer.experts[e].parameters()]
            for p in layer.experts[e].parameters():
                p.add_(1.0)
            after = layer(x)
            changed = (after - before).abs().max(-1).values > 0
            assert torch.equal(changed, (top_i == e).any(-1))
            for p, s in zip(layer.experts[e].parameters(), saved):
                p.copy_(s)


def test_ties_go_to_lower_index():
    layer = MoELayer(2, 3, 3, 1).double()
    with torch.no_grad():
        layer.router.weight.zero_()
    _, _, top_i = layer.route(torch.randn(4, 2, dtype=torch.float64))
    assert (top_i == 0).all()


def test_beta_zero_reduces_to_shared():
    layer = moe_2d(seed=2)
    with torch.no_grad():
        layer.combine_logits.copy_(torch.tensor([0.0, -1e4]))
    x = torch.randn(5, 2, dtype=torch.float64)
    assert torch.allclose(layer(x), layer.shared_expert(x), atol=1e-12)


def test_non_finite_input_raises():
    layer = MoELayer(2, 3, 2, 1)
    with pytest.raises(NumericError):
        layer(torch.tensor([[float("nan"), 0.0]]))


def test_invalid_layout():
    with pytest.raises(ValueError):
        MoELayer(2, 3, 2, 3)


def test_output_rows_are_distributions(toy_vocab, batch):
    model = build_model(desk_config(len(toy_vocab)), seed=0)
    logp = forward(model, batch)
    p = logp.exp().sum(-1)
    assert torch.allclose(p, torch.ones_like(p), atol=1e-5)


def test_batch_permutation_equivariance(toy_vocab, batch):
    model = build_model(desk_config(len(toy_vocab)), seed=0).double().eval()
    ids = torch.as_tensor(batch.input_ids)
    mask = torch.as_tensor(batch.attention_mask)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    out = model(ids, mask)
    out_p = model(ids[perm], mask[perm])
    assert torch.allclose(out[perm], out_p, atol=1e-10)


def test_padding_does_not_leak(toy_vocab, batch):
    # A row's real positions are unchanged by how much padding follows it.
    model = build_model(desk_config(len(toy_vocab)), seed=0).double().eval()
    ids = torch.as_tensor(batch.input_ids[:1])
    mask = torch.as_tensor(batch.attention_mask[:1])
    n = int(mask.sum())
    short = model(ids[:, :n], mask[:, :n])
    long_ids = torch.cat([ids[:, :n], torch.zeros(1, 10, dtype=ids.dtype)], 1)
    long_mask = torch.cat([mask[:, :n], torch.zeros(1, 10, dtype=mask.dtype)], 1)
    longer = model(long_ids, long_mask)[:, :n]
    assert torch.allclose(short, longer, atol=1e-10)


def test_cls_sep_only_input(toy_vocab):
    model = build_model(desk_config(len(toy_vocab)), seed=0).eval()
    out = model(torch.tensor([[CLS_ID, SEP_ID]]))
    assert out.shape == (1, 2, len(toy_vocab))
    assert torch.isfinite(out).all()


def test_forward_validation(toy_vocab):
    model = build_model(desk_config(len(toy_vocab)), seed=0)
    with pytest.raises(ValueError):
        model(torch.tensor([CLS_ID, SEP_ID]))
    with pytest.raises(ValueError):
        model(torch.full((1, 129), CLS_ID))
    with pytest.raises(ValueError):
        model(torch.tensor([[CLS_ID, SEP_ID]]), torch.ones(1, 3, dtype=torch.long))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=40, hidden_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=40, num_layers=2, moe_plan={5: (2, 1)})
    cfg = desk_config(50)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def uniform_model(vocab_size):
    model = build_model(desk_config(vocab_size), seed=0)
    with torch.no_grad():
        model.tok_emb.weight.zero_()
        model.head_bias.zero_()
    return model


def test_loss_of_uniform_model(toy_vocab, batch):
    # Every position predicts 1/V, so each masked token costs ln V.
    model = uniform_model(len(toy_vocab))
    with torch.no_grad():
        loss = mlm_loss(forward(model, batch), batch)
    m = batch.num_masked
    assert loss.n_masked == m
    assert float(loss.total) == pytest.approx(m * np.log(len(toy_vocab)), rel=1e-5)
    assert float(loss.mean) == pytest.approx(np.log(len(toy_vocab)), rel=1e-5)


def test_loss_equals_sum_over_letter_sets(toy_vocab, batch):
    model = build_model(desk_config(len(toy_vocab)), seed=4)
    logp = forward(model, batch).detach()
    flat_logp = logp.reshape(-1, logp.shape[-1])
    flat_tgt = batch.target_ids.reshape(-1)
    per_letter = 0.0
    for positions in batch.letter_index_sets().values():
        for i in positions:
            per_letter -= float(flat_logp[i, flat_tgt[i]])
    assert float(mlm_loss(logp, batch).total) == pytest.approx(per_letter, rel=1e-6)


def test_zero_mask_batch(table, toy_sentences, toy_vocab):
    model = build_model(desk_config(len(toy_vocab)), seed=0)
    empty = build_batch(toy_sentences[:3], MaskingConfig(mask_prob=0.0), table, toy_vocab)
    with pytest.warns(RuntimeWarning):
        loss = mlm_loss(forward(model, empty), empty)
    assert float(loss.total.detach()) == 0.0 and loss.n_masked == 0
    grads = compute_gradients(model, empty)
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())


def test_gradient_scales_linearly(toy_vocab, batch):
    model = build_model(tiny_config(len(toy_vocab)), seed=0).double()
    g1 = compute_gradients(model, batch)
    g3 = compute_gradients(model, batch, loss_scale=3.0)
    gs = compute_gradients(model, batch, reduction="sum")
    for name in g1:
        assert torch.allclose(3 * g1[name], g3[name], atol=1e-12)
        assert torch.allclose(batch.num_masked * g1[name], gs[name], atol=1e-10)


def test_unrouted_experts_get_zero_gradient(toy_vocab, batch):
    model = build_model(tiny_config(len(toy_vocab), moe_plan={1: (4, 1)}), seed=0).double()
    moe = model.layers[1].ffn
    with torch.no_grad():
        moe.router.weight.zero_()
    # All router weights equal: every token goes to expert 0.
    grads = compute_gradients(model, batch)
    for e in (1, 2, 3):
        assert float(grads[f"layers.1.ffn.experts.{e}.fc_in.weight"].abs().max()) == 0.0
    assert float(grads["layers.1.ffn.experts.0.fc_in.weight"].abs().max()) > 0.0


def test_router_and_combine_gradients_match_differences(toy_vocab, batch, table):
    model = build_model(tiny_config(len(toy_vocab)), seed=2).double()
    with torch.no_grad():
        model.layers[1].ffn.combine_logits.copy_(torch.tensor([0.3, -0.2]))
    grads = compute_gradients(model, batch)

    def f():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return float(mlm_loss(forward(model, batch), batch).mean)

    names = ["layers.1.ffn.router.weight", "layers.1.ffn.combine_logits"]
    params = dict(model.named_parameters())
    fd = oracles.central_differences(f, [params[n] for n in names])
    for n, g in zip(names, fd):
        err = float((grads[n] - g).norm() / max(float(g.norm()), 1e-12))
        assert err < 1e-4, (n, err)


def test_densify_equivalence(toy_vocab, batch):
    dense = build_model(desk_config(len(toy_vocab), moe_plan={}), seed=0).eval()
    moe = densify_to_moe(dense, {1: (2, 1), 3: (4, 2)}, seed=1).eval()
    assert sorted(moe.moe_layers()) == [1, 3]
    ids, mask = torch.as_tensor(batch.input_ids), torch.as_tensor(batch.attention_mask)
    diff = (dense(ids, mask).exp() - moe(ids, mask).exp()).abs().max()
    assert float(diff.detach()) < 1e-3
    assert torch.equal(moe.layers[1].ffn.shared_expert.fc_in.weight, dense.layers[1].ffn.fc_in.weight)
    assert torch.equal(moe.layers[0].attn.qkv.weight, dense.layers[0].attn.qkv.weight)


def test_densify_rejects_bad_plan(toy_vocab):
    dense = build_model(desk_config(len(toy_vocab), moe_plan={}), seed=0)
    with pytest.raises(ValueError):
        densify_to_moe(dense, {7: (2, 1)})
    moe = densify_to_moe(dense, {1: (2, 1)})
    with pytest.raises(ValueError):
        densify_to_moe(moe, {1: (2, 1)})


def small_train(toy_sentences, table, toy_vocab, **kw):
    cfg = TrainConfig(**{"epochs": 2, "batch_size": 16, **kw})
    model = build_model(tiny_config(len(toy_vocab)), seed=0)
    return model, train(model, toy_sentences, table, toy_vocab, cfg)


def test_zero_lr_leaves_weights_unchanged(table, toy_sentences, toy_vocab):
    before = build_model(tiny_config(len(toy_vocab)), seed=0).state_dict()
    model, result = small_train(toy_sentences, table, toy_vocab, lr=0.0)
    for name, t in model.state_dict().items():
        assert torch.equal(t, before[name]), name
    assert len(result.history) == 2


def test_training_is_deterministic(table, toy_sentences, toy_vocab):
    a, ra = small_train(toy_sentences, table, toy_vocab)
    b, rb = small_train(toy_sentences, table, toy_vocab)
    assert [e.sum_loss for e in ra.history] == [e.sum_loss for e in rb.history]
    for (n, t), u in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(t, u), n


def test_training_reduces_loss(table, toy_sentences, toy_vocab):
    _, result = small_train(toy_sentences, table, toy_vocab, epochs=15, lr=3e-3)
    assert result.history[-1].mean_loss < result.history[0].mean_loss


def test_warmup_ramps_learning_rate(table, toy_sentences, toy_vocab):
    _, result = small_train(toy_sentences, table, toy_vocab, epochs=3, warmup_epochs=2.0)
    lrs = [e.lr for e in result.history]
    assert lrs[0] < lrs[1] <= lrs[2] == pytest.approx(1e-3)


def test_divergence_restores_last_good(table, toy_sentences, toy_vocab):
    model = build_model(tiny_config(len(toy_vocab)), seed=0)
    seen = []

    def poison(entry):
        seen.append(entry)
        if entry.epoch == 0:
            with torch.no_grad():
                model.tok_emb.weight[5:].fill_(float("nan"))

    with pytest.raises(TrainingDivergedError) as info:
        train(model, toy_sentences, table, toy_vocab, TrainConfig(epochs=3, batch_size=16), on_epoch=poison)
    assert info.value.epoch == 1
    assert len(info.value.history) == 1
    # The snapshot was taken before the poisoning.
    assert not torch.isnan(model.tok_emb.weight).any()


def test_train_rejects_mismatched_vocab(table, toy_sentences, toy_vocab):
    model = build_model(tiny_config(len(toy_vocab) + 1), seed=0)
    with pytest.raises(ValueError):
        train(model, toy_sentences, table, toy_vocab, TrainConfig(epochs=1))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 2**16))
def test_moe_random_layouts_match_oracle(n_exp, k, seed):
    k = min(k, n_exp)
    layer = moe_2d(seed=seed, n_exp=n_exp, k=k)
    x = torch.randn(3, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    out = layer(x).detach().numpy()
    experts = [oracles.ffn_params(e) for e in layer.experts]
    shared = oracles.ffn_params(layer.shared_expert)
    for i in range(3):
        want = oracles.moe_token(x[i].numpy(), layer.router.weight.detach().numpy(), experts,
                                 shared, layer.combine_logits.detach().numpy(), k)
        np.testing.assert_allclose(out[i], want, atol=1e-6, rtol=0)


def test_model_is_module():
    assert issubclass(MaskedLM, torch.nn.Module)


def test_zero_routed_experts_leave_shared_scaled():
    layer = moe_2d(seed=4)
    with torch.no_grad():
        for e in layer.experts:
            e.fc_out.weight.zero_()
            e.fc_out.bias.zero_()
    x = torch.randn(6, 2, dtype=torch.float64)
    alpha, _ = layer.mixing_weights()
    assert torch.allclose(layer(x), alpha * layer.shared_expert(x), atol=1e-12)


def test_densify_with_empty_plan_is_identity(toy_vocab):
    dense = build_model(desk_config(len(toy_vocab), moe_plan={}), seed=0)
    same = densify_to_moe(dense, {})
    for (n, a), b in zip(dense.state_dict().items(), same.state_dict().values()):
        assert torch.equal(a, b), n
