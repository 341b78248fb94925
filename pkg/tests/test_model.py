import numpy as np
import pytest
import torch

from atam.data import normalize_adjacency
from atam.errors import ConfigError, DataError, TrainingAbort
from atam.model import (
    AtamModel,
    BackboneKind,
    EmbeddingSource,
    FrlmConfig,
    GcnConfig,
    ModelConfig,
    gcn_propagate,
    load_checkpoint,
    mll_forward,
    predict_probs,
    save_checkpoint,
)

SLOPE = 0.2


def tiny_config(seed=0, c=3):
    return ModelConfig(
        n_categories=c,
        frlm=FrlmConfig(input_dim=6, feature_dim=8, head_hidden=5, fusion_dim=4),
        gcn=GcnConfig(embed_dim=4, layer_dims=(5, 4)),
        seed=seed,
    )


class TestGcnPropagate:
    def test_identity_adjacency_identity_weight(self):
        h0 = torch.tensor([[1.0, -2.0], [-0.5, 3.0]])
        out = gcn_propagate(h0, torch.eye(2), [torch.eye(2)], SLOPE)
        torch.testing.assert_close(out, torch.nn.functional.leaky_relu(h0, SLOPE))

    def test_two_by_two_hand_multiply(self):
        adj = torch.tensor([[1 / 3, 2 / 3], [2 / 3, 1 / 3]])
        h0 = torch.tensor([[3.0, 0.0], [0.0, 3.0]])
        out = gcn_propagate(h0, adj, [torch.eye(2)], SLOPE)
        # pre-activation [[1,2],[2,1]] is all positive, LeakyReLU passes it through
        torch.testing.assert_close(out, torch.tensor([[1.0, 2.0], [2.0, 1.0]]))

    def test_zero_weight_absorbs(self):
        h0 = torch.randn(3, 4)
        out = gcn_propagate(h0, torch.eye(3), [torch.zeros(4, 4), torch.eye(4)], SLOPE)
        torch.testing.assert_close(out, torch.zeros(3, 4))

    def test_dim_mismatch_names_layer(self):
        with pytest.raises(DataError, match="layer 1"):
            gcn_propagate(torch.randn(3, 4), torch.eye(3), [torch.randn(4, 5), torch.randn(4, 5)])


class TestModelForward:
    def test_equal_node_rows_give_equal_logits(self):
        cfg = tiny_config()
        model = AtamModel(cfg)
        with torch.no_grad():
            model.embeddings.copy_(model.embeddings[0].repeat(cfg.n_categories, 1))
        # identity adjacency keeps the rows equal through propagation
        model.set_adjacency(np.eye(cfg.n_categories))
        x = torch.randn(5, 6, generator=torch.Generator().manual_seed(1))
        z, _ = model(x)
        assert torch.allclose(z, z[:, :1].expand_as(z), atol=1e-6)
        fused = model.head(model.backbone(x))
        g = model.gcn_forward()[0]
        torch.testing.assert_close(z[:, 0], fused @ g)

    def test_zero_head_gives_half_probabilities(self):
        model = AtamModel(tiny_config())
        with torch.no_grad():
            model.head[2].weight.zero_()
            model.head[2].bias.zero_()
        z, p = model(torch.randn(4, 6))
        assert torch.all(z == 0)
        assert torch.all(p == 0.5)

    def test_hand_chained_forward(self):
        """Recompute the whole forward pass with plain numpy chaining."""
        cfg = tiny_config(seed=9)
        model = AtamModel(cfg)
        adj = normalize_adjacency(np.array([[0, 2, 0], [2, 0, 1], [0, 1, 0]]))
        model.set_adjacency(adj)
        x = np.random.default_rng(5).normal(size=(2, 6)).astype(np.float32)

        def leaky(a):
            return np.where(a > 0, a, SLOPE * a)

        def relu(a):
            return np.maximum(a, 0)

        w0, b0 = (t.detach().numpy() for t in model.backbone[0].parameters())
        h1w, h1b = (t.detach().numpy() for t in model.head[0].parameters())
        h2w, h2b = (t.detach().numpy() for t in model.head[2].parameters())
        feat = relu(x @ w0.T + b0)
        fused = relu(feat @ h1w.T + h1b) @ h2w.T + h2b
        g = model.embeddings.numpy()
        for w in model.gcn_weights:
            g = leaky(adj @ (g @ w.detach().numpy()))
        expected = fused @ g.T
        z, p = mll_forward(model, torch.as_tensor(x))
        np.testing.assert_allclose(z.detach().numpy(), expected, rtol=1e-5)
        np.testing.assert_allclose(p.detach().numpy(), 1 / (1 + np.exp(-expected)), rtol=1e-5)

    def test_forward_is_pure(self):
        model = AtamModel(tiny_config())
        x = torch.randn(3, 6)
        z1, p1 = model(x)
        z2, p2 = model(x)
        torch.testing.assert_close(z1, z2, rtol=0, atol=0)
        torch.testing.assert_close(p1, p2, rtol=0, atol=0)

    def test_nan_input_aborts(self):
        model = AtamModel(tiny_config())
        x = torch.full((1, 6), float("nan"))
        with pytest.raises(TrainingAbort):
            model(x)

    def test_category_count_changes_only_logit_width(self):
        m3 = AtamModel(tiny_config(c=3))
        m5 = AtamModel(tiny_config(c=5))
        assert m3.head[2].weight.shape == m5.head[2].weight.shape
        assert [w.shape for w in m3.gcn_weights] == [w.shape for w in m5.gcn_weights]
        x = torch.randn(2, 6)
        assert m3(x)[0].shape == (2, 3)
        assert m5(x)[0].shape == (2, 5)

    def test_same_seed_same_init(self):
        a = AtamModel(tiny_config(seed=4))
        b = AtamModel(tiny_config(seed=4))
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            torch.testing.assert_close(va, vb, rtol=0, atol=0)


class TestConfigValidation:
    def test_fusion_dim_mismatch(self):
        cfg = tiny_config()
        cfg.gcn = GcnConfig(embed_dim=4, layer_dims=(5, 7))
        with pytest.raises(ConfigError, match="fusion dim"):
            AtamModel(cfg)

    def test_external_backbone_dims(self):
        cfg = tiny_config()
        cfg.frlm = FrlmConfig(backbone=BackboneKind.EXTERNAL, input_dim=6, feature_dim=8,
                              head_hidden=5, fusion_dim=4)
        with pytest.raises(ConfigError):
            AtamModel(cfg)

    def test_one_hot_embeddings(self):
        cfg = tiny_config()
        cfg.gcn = GcnConfig(embed_dim=3, layer_dims=(4,), embedding_source=EmbeddingSource.ONE_HOT_PROJECTED)
        cfg.frlm.fusion_dim = 4
        model = AtamModel(cfg)
        torch.testing.assert_close(model.embeddings, torch.eye(3))

    def test_file_embeddings(self, tmp_path):
        emb = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        path = tmp_path / "emb.npy"
        np.save(path, emb)
        cfg = tiny_config()
        cfg.gcn = GcnConfig(embed_dim=4, layer_dims=(5, 4),
                            embedding_source=EmbeddingSource.FILE, embedding_file=str(path))
        model = AtamModel(cfg)
        np.testing.assert_allclose(model.embeddings.numpy(), emb, rtol=1e-6)


class TestCheckpoint:
    def test_round_trip_predictions_bit_identical(self, tmp_path):
        model = AtamModel(tiny_config(seed=2))
        model.set_adjacency(normalize_adjacency(np.array([[0, 1, 0], [1, 0, 2], [0, 2, 0]])))
        feats = np.random.default_rng(1).normal(size=(7, 6)).astype(np.float32)
        before = predict_probs(model, feats)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, extra={"note": "test"})
        loaded, extra = load_checkpoint(path)
        assert extra == {"note": "test"}
        after = predict_probs(loaded, feats)
        np.testing.assert_array_equal(before, after)

    def test_save_is_byte_deterministic(self, tmp_path):
        model = AtamModel(tiny_config(seed=2))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        save_checkpoint(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"whatever\n{}\n")
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)


class TestGradientsAgainstFiniteDifferences:
    def test_full_model_gradients(self):
        """Analytic (autograd) gradients of a focal total loss through the whole
        model vs central finite differences, tiny seeded double-precision model."""
        from atam.losses import LossConfig, focal_loss_known, focal_loss_pseudo, total_loss

        cfg = tiny_config(seed=13)
        model = AtamModel(cfg).double()
        model.set_adjacency(normalize_adjacency(np.array([[0, 3, 1], [3, 0, 0], [1, 0, 0]])))
        rng = np.random.default_rng(17)
        x = torch.tensor(rng.normal(size=(4, 6)))
        y_k = torch.tensor(rng.choice([1.0, -1.0], size=(4, 3)).astype(np.float64))
        k_mask = torch.tensor(rng.random((4, 3)) < 0.6)
        s_mask = ~k_mask & torch.tensor(rng.random((4, 3)) < 0.5)
        temps = torch.tensor(rng.uniform(0.5, 12.0, size=(4, 3)))
        loss_cfg = LossConfig()
        loss_cfg.class_weights = np.array([0.2, 0.5, 0.3])

        def compute_loss():
            z, p = model(x)
            cls_k = torch.nonzero(k_mask, as_tuple=False)[:, 1]
            cls_s = torch.nonzero(s_mask, as_tuple=False)[:, 1]
            l_k = focal_loss_known(p[k_mask], y_k[k_mask], cls_k, loss_cfg)
            l_s = focal_loss_pseudo(z[s_mask], temps[s_mask], y_k[s_mask], cls_s, loss_cfg)
            return total_loss(l_k, l_s, 0.5)

        loss = compute_loss()
        model.zero_grad()
        loss.backward()

        h = 1e-5
        for name, param in model.named_parameters():
            analytic = param.grad.detach().numpy().copy()
            numeric = np.zeros_like(analytic)
            flat = param.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = compute_loss().item()
                flat[i] = orig - h
                dn = compute_loss().item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - dn) / (2 * h)
            denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
            rel = np.abs(analytic - numeric).max() / denom
            assert rel < 1e-4, f"gradient mismatch for {name}: rel={rel:.2e}"
