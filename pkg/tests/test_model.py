import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tabrep.model import (
    Checkpoint,
    EncodingFault,
    ModelConfig,
    build_model,
    l2_normalize,
    parameter_group,
    zero_norm_events,
)


def small_model(m=6, seed=0, **kw):
    config = ModelConfig(n_features=m, token_dim=4, n_layers=2, n_heads=2, **kw)
    return build_model(config, seed)


class TestConfig:
    def test_defaults_derive_from_feature_count(self):
        config = ModelConfig(n_features=20)
        assert config.z_dim == 10
        assert config.ff_dim == 64
        assert config.mlp_hidden == 10

    def test_odd_feature_count_floors(self):
        assert ModelConfig(n_features=5).z_dim == 2
        assert ModelConfig(n_features=1).z_dim == 1

    def test_head_divisibility_checked(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(n_features=4, token_dim=6, n_heads=4)


class TestInputWeights:
    def test_all_ones_is_identity(self):
        model = small_model()
        x = torch.rand(3, 6, dtype=torch.float64)
        np.testing.assert_array_equal(
            model.apply_input_weights(x).detach().numpy(), x.numpy()
        )

    def test_elementwise_product(self):
        model = small_model(m=2)
        with torch.no_grad():
            model.input_weights.copy_(torch.tensor([2.0, 0.0], dtype=torch.float64))
        out = model.apply_input_weights(
            torch.tensor([[0.5, 0.2]], dtype=torch.float64)
        )
        np.testing.assert_allclose(out.detach().numpy(), [[1.0, 0.0]], atol=0)

    def test_gradient_matches_finite_differences(self):
        # d(sum(v * (x.W)))/dW_j = v_j * x_j, checked centrally
        rng = np.random.default_rng(0)
        model = small_model(m=5)
        x = torch.from_numpy(rng.random((1, 5)))
        v = torch.from_numpy(rng.random((1, 5)))
        out = (model.apply_input_weights(x) * v).sum()
        out.backward()
        analytic = model.input_weights.grad.numpy().copy()
        h = 1e-6
        for j in range(5):
            with torch.no_grad():
                model.input_weights[j] += h
                up = float((model.apply_input_weights(x) * v).sum())
                model.input_weights[j] -= 2 * h
                down = float((model.apply_input_weights(x) * v).sum())
                model.input_weights[j] += h
            fd = (up - down) / (2 * h)
            assert abs(analytic[j] - fd) / max(abs(fd), 1e-12) < 1e-6

    def test_length_mismatch_rejected(self):
        model = small_model(m=4)
        with pytest.raises(ValueError, match="features"):
            model.apply_input_weights(torch.zeros(1, 5, dtype=torch.float64))


class TestEncode:
    def test_bottleneck_width_is_half_input(self):
        config = ModelConfig(n_features=20)
        model = build_model(config, 0)
        z = model.encode(torch.rand(3, 20, dtype=torch.float64))
        assert z.shape == (3, 10)

    def test_token_permutation_with_parameters_is_invariant(self):
        model = small_model(m=6, seed=3)
        x = torch.rand(2, 6, dtype=torch.float64)
        z_ref = model.encode(x).detach().numpy()
        perm = [1, 0, 2, 3, 5, 4]
        with torch.no_grad():
            for tensor in (
                model.tokenizer.scale,
                model.tokenizer.bias,
                model.tokenizer.column_embeddings,
            ):
                tensor.copy_(tensor[perm])
        z_perm = model.encode(x[:, perm]).detach().numpy()
        np.testing.assert_allclose(z_perm, z_ref, atol=1e-12)

    def test_purity(self):
        model = small_model(seed=5)
        x = torch.rand(4, 6, dtype=torch.float64)
        a = model.encode(x).detach().numpy()
        b = model.encode(x.clone()).detach().numpy()
        np.testing.assert_array_equal(a, b)

    def test_non_finite_activation_faults_with_layer(self):
        model = small_model(seed=1)
        with torch.no_grad():
            model.blocks[1].ff_out.weight.fill_(float("inf"))
        with pytest.raises(EncodingFault, match="layer 2") as info:
            model.encode(torch.rand(2, 6, dtype=torch.float64))
        assert info.value.layer == 2


class TestDecode:
    def test_zero_embedding_zero_bias_gives_half(self):
        model = small_model()
        with torch.no_grad():
            model.decoder.bias.zero_()
        out = model.decode(torch.zeros(1, model.config.z_dim, dtype=torch.float64))
        np.testing.assert_allclose(out.detach().numpy(), 0.5, atol=0)

    def test_outputs_strictly_inside_unit_interval(self, rng):
        model = small_model(seed=2)
        z = torch.from_numpy(rng.normal(0, 3, (10, model.config.z_dim)))
        out = model.decode(z).detach().numpy()
        assert (out > 0).all() and (out < 1).all()

    def test_decoder_parameter_count(self):
        config = ModelConfig(n_features=12)
        model = build_model(config, 0)
        count = sum(p.numel() for n, p in model.named_parameters() if n.startswith("decoder"))
        assert count == config.z_dim * 12 + 12


class TestClassify:
    def test_zero_weights_give_uniform_probabilities(self):
        model = small_model(m=6, n_classes=3)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name.startswith("classifier"):
                    p.zero_()
        logits = model.classify(torch.rand(4, model.config.z_dim, dtype=torch.float64))
        probs = torch.softmax(logits, dim=-1).detach().numpy()
        np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)

    def test_binary_logit_shape(self):
        model = small_model(m=6, n_classes=2)
        logits = model.classify(torch.rand(5, model.config.z_dim, dtype=torch.float64))
        assert logits.shape == (5, 2)


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize(torch.tensor([3.0, 4.0], dtype=torch.float64))
        np.testing.assert_allclose(out.numpy(), [0.6, 0.8], atol=1e-15)

    def test_idempotent_on_unit_vectors(self):
        v = torch.tensor([0.6, 0.8], dtype=torch.float64)
        np.testing.assert_allclose(l2_normalize(v).numpy(), v.numpy(), atol=1e-15)

    def test_zero_vector_passes_through_with_warning(self):
        before = zero_norm_events()
        z = torch.zeros(2, 3, dtype=torch.float64)
        z[1, 0] = 5.0
        with pytest.warns(UserWarning, match="zero vector"):
            out = l2_normalize(z)
        assert zero_norm_events() == before + 1
        np.testing.assert_array_equal(out[0].numpy(), [0.0, 0.0, 0.0])
        np.testing.assert_allclose(out[1].numpy(), [1.0, 0.0, 0.0], atol=1e-15)

    def test_gradient_finite_when_row_collapses(self):
        z = torch.zeros(1, 3, dtype=torch.float64, requires_grad=True)
        with pytest.warns(UserWarning):
            out = l2_normalize(z)
        out.sum().backward()
        assert torch.isfinite(z.grad).all()


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.floats(min_value=-100, max_value=100, allow_nan=False),
        min_size=1,
        max_size=16,
    ).filter(lambda v: sum(x * x for x in v) > 1e-12)
)
def test_l2_normalize_unit_norm_property(values):
    out = l2_normalize(torch.tensor(values, dtype=torch.float64))
    assert abs(float((out * out).sum()) - 1.0) < 1e-12


class TestParameterGroups:
    def test_every_parameter_is_grouped(self):
        model = small_model()
        groups = {parameter_group(name) for name, _ in model.named_parameters()}
        assert groups == {
            "input_weights",
            "tokenizer",
            "encoder",
            "decoder",
            "classifier",
            "finetune_head",
        }


class TestCheckpoint:
    def test_bit_exact_reload(self, tmp_path):
        model = small_model(m=8, seed=9)
        x = torch.rand(5, 8, dtype=torch.float64)
        z_before = model.embed(x).detach().numpy()
        path = tmp_path / "model.ckpt"
        Checkpoint.from_model(model, step=17, preprocessor_hash="abc").save(path)
        loaded = Checkpoint.load(path)
        assert loaded.step == 17
        assert loaded.preprocessor_hash == "abc"
        rebuilt = loaded.build_model()
        z_after = rebuilt.embed(x).detach().numpy()
        np.testing.assert_array_equal(z_after, z_before)

    def test_digest_tracks_content(self):
        a = Checkpoint.from_model(small_model(seed=1))
        b = Checkpoint.from_model(small_model(seed=1))
        c = Checkpoint.from_model(small_model(seed=2))
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()

    def test_version_checked(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b'{"format_version": 99}')
        with pytest.raises(ValueError, match="version"):
            Checkpoint.load(path)

    def test_same_seed_same_initialization(self):
        a = small_model(seed=21)
        b = small_model(seed=21)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.detach().numpy(), pb.detach().numpy())
