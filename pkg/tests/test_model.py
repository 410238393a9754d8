"""Network layers, losses, and training-loop behavior on toy problems."""

import numpy as np
import pytest

from cellscape import autodiff as ad
from cellscape.autodiff import Tensor
from cellscape.dataset import ExpressionDataset
from cellscape.gene_map import layout_genes
from cellscape.losses import contrastive_loss, sce_loss
from cellscape.network import CellScapeModel, ModelConfig, fuse, gat_layer
from cellscape.preprocess import pearson_coexpression
from cellscape.spatial_graph import SpatialGraph, build_knn_graph
from cellscape.training import embed, train

from oracles import finite_difference_grads, relative_error

TOY_CFG = dict(
    gat_layers=2,
    attention_heads=2,
    hidden_dim=8,
    embed_dim=4,
    cnn_channels=(2,),
    tau=0.5,
    mask_ratio=0.3,
    learning_rate=1e-3,
)


def toy_dataset(n=20, p=16, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.poisson(3.0, size=(p, n)).astype(float) + rng.random((p, n))
    coords = rng.random((2, n))
    ds = ExpressionDataset(
        X=X,
        coords=coords,
        gene_names=[f"g{i}" for i in range(p)],
        cell_ids=[f"c{j}" for j in range(n)],
        raw_counts=X.copy(),
    )
    graph = build_knn_graph(coords, k=3)
    layout = layout_genes(pearson_coexpression(ds), seed=seed)
    return ds, graph, layout


class TestGatLayer:
    def _path_graph(self):
        return SpatialGraph(3, np.array([[0, 1], [1, 2]]), np.ones(2))

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        g = build_knn_graph(rng.random((2, 10)), k=2)
        dst, src = g.directed_edges()
        W = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        a_c = [Tensor(rng.standard_normal((4, 1)), requires_grad=True)]
        a_n = [Tensor(rng.standard_normal((4, 1)), requires_grad=True)]
        attn = []
        gat_layer(Tensor(rng.standard_normal((10, 5))), dst, src, 10, W, a_c, a_n,
                  4, 0.2, average=True, collect_attention=attn)
        alpha, dst_idx = attn[0]
        sums = np.zeros(10)
        np.add.at(sums, dst_idx, alpha[:, 0])
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_identical_features_uniform_attention(self):
        g = self._path_graph()
        dst, src = g.directed_edges()
        rng = np.random.default_rng(1)
        W = Tensor(rng.standard_normal((4, 3)))
        a_c = [Tensor(rng.standard_normal((3, 1)))]
        a_n = [Tensor(rng.standard_normal((3, 1)))]
        h = Tensor(np.tile(rng.standard_normal(4), (3, 1)))
        attn = []
        gat_layer(h, dst, src, 3, W, a_c, a_n, 3, 0.2, True, collect_attention=attn)
        alpha, dst_idx = attn[0]
        for node in range(3):
            vals = alpha[dst_idx == node, 0]
            np.testing.assert_allclose(vals, vals[0], atol=1e-12)

    def test_hand_computed_scalar_attention(self):
        # path 0-1-2, h=(0,1,2), W=1, scores e_ij = h_i + h_j, self-loops on
        g = self._path_graph()
        dst, src = g.directed_edges()
        out = gat_layer(
            Tensor(np.array([[0.0], [1.0], [2.0]])), dst, src, 3,
            Tensor(np.array([[1.0]])),
            [Tensor(np.array([[1.0]]))],
            [Tensor(np.array([[1.0]]))],
            1, 0.2, average=True,
        )
        e = np.exp(1.0)
        expected = (e**2 + 2 * e**3) / (e + e**2 + e**3)
        assert out.values[1, 0] == pytest.approx(expected, rel=1e-12)


class TestCnnEncoder:
    def test_zero_maps_zero_embedding(self):
        cfg = ModelConfig(seed=0, **TOY_CFG)
        model = CellScapeModel(16, 4, cfg)
        z = model.encode_intrinsic(np.zeros((6, 4, 4)), training=True, update_running=False)
        np.testing.assert_allclose(z.values, 0.0, atol=1e-12)

    def test_batch_permutation_equivariance(self):
        cfg = ModelConfig(seed=1, **TOY_CFG)
        model = CellScapeModel(16, 4, cfg)
        rng = np.random.default_rng(2)
        maps = rng.random((8, 4, 4))
        perm = rng.permutation(8)
        z = model.encode_intrinsic(maps, training=True, update_running=False).values
        zp = model.encode_intrinsic(maps[perm], training=True, update_running=False).values
        np.testing.assert_allclose(zp, z[perm], atol=1e-12)

    def test_small_grid_rejected(self):
        cfg = ModelConfig(seed=0, **TOY_CFG)
        with pytest.raises(ValueError, match="q=3"):
            CellScapeModel(9, 3, cfg)


class TestFuse:
    def test_identity_is_concat(self):
        z = fuse([1.0, 2.0], [3.0], np.eye(3))
        np.testing.assert_array_equal(z, [1, 2, 3])

    def test_zero_intrinsic_block(self):
        rng = np.random.default_rng(3)
        W = rng.standard_normal((2, 5))
        z_sp = rng.standard_normal(3)
        np.testing.assert_allclose(
            fuse(z_sp, np.zeros(2), W), W[:, :3] @ z_sp, atol=1e-12
        )

    def test_scalar_case(self):
        assert fuse([1.0], [4.0], np.array([[2.0, 3.0]]))[0] == pytest.approx(14.0)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="incompatible"):
            fuse([1.0, 2.0], [3.0], np.eye(2))


class TestSceLoss:
    def test_perfect_reconstruction_exact_zero(self):
        x = np.array([[3.0, 4.0], [1.0, 0.0]])
        loss = sce_loss(x, Tensor(x.copy()), np.array([0, 1]), gamma=3.0)
        assert loss.item() == 0.0

    def test_opposite_gives_eight(self):
        x = np.array([[3.0, 4.0]])
        loss = sce_loss(x, Tensor(-x), np.array([0]), gamma=3.0)
        assert loss.item() == 8.0

    def test_orthogonal_gives_one(self):
        x = np.array([[1.0, 0.0]])
        loss = sce_loss(x, Tensor(np.array([[0.0, 1.0]])), np.array([0]), gamma=3.0)
        assert loss.item() == 1.0

    def test_zero_norm_warns_and_contributes_one(self):
        x = np.array([[1.0, 1.0], [2.0, 0.0]])
        with pytest.warns(RuntimeWarning, match="zero norm"):
            loss = sce_loss(x, Tensor(np.array([[0.0, 0.0], [2.0, 0.0]])), np.array([0, 1]))
        assert loss.item() == pytest.approx(0.5)  # (1 + 0) / 2

    def test_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            x = rng.standard_normal((5, 3))
            x_hat = Tensor(rng.standard_normal((5, 3)))
            val = sce_loss(x, x_hat, np.arange(5), gamma=3.0).item()
            assert 0.0 <= val <= 8.0

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            sce_loss(np.ones((2, 2)), Tensor(np.ones((2, 2))), np.array([], dtype=int))


class TestContrastiveLoss:
    def test_two_cell_identical_embeddings(self):
        z = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        loss = contrastive_loss(z, [np.array([1]), np.array([0])], tau=1.0)
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_two_cell_closed_form_monotone(self):
        previous = None
        for s in (-0.5, 0.0, 0.4, 0.9):
            # rows unit-norm with dot product s
            z = Tensor(np.array([[1.0, 0.0], [s, np.sqrt(1 - s * s)]]))
            loss = contrastive_loss(z, [np.array([1]), np.array([0])], tau=1.0).item()
            expected = -np.log(np.exp(s) / (np.exp(s) + np.exp(1.0)))
            assert loss == pytest.approx(expected, abs=1e-9)
            if previous is not None:
                assert loss < previous
            previous = loss

    def test_rotation_invariance(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((8, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        nbrs = [np.array([(i + 1) % 8, (i + 7) % 8]) for i in range(8)]
        base = contrastive_loss(Tensor(z), nbrs, tau=0.5).item()
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        rotated = contrastive_loss(Tensor(z @ q), nbrs, tau=0.5).item()
        assert rotated == pytest.approx(base, abs=1e-9)

    def test_loss_non_negative(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            z = rng.standard_normal((6, 3))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            nbrs = [np.array([(i + 1) % 6]) for i in range(6)]
            assert contrastive_loss(Tensor(z), nbrs, tau=0.3).item() >= 0.0

    def test_errors(self):
        z = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        with pytest.raises(ValueError, match="cell 1"):
            contrastive_loss(z, [np.array([1]), np.array([], dtype=int)], tau=1.0)
        with pytest.raises(ValueError, match="temperature"):
            contrastive_loss(z, [np.array([1]), np.array([0])], tau=0.0)
        with pytest.raises(ValueError, match="unit-norm"):
            contrastive_loss(z * 2.0, [np.array([1]), np.array([0])], tau=1.0)


class TestModelGradients:
    def test_full_model_matches_finite_differences(self):
        ds, graph, layout = toy_dataset(n=12, p=16, seed=7)
        cfg = ModelConfig(seed=7, **TOY_CFG)
        model = CellScapeModel(16, layout.q, cfg)
        from cellscape.gene_map import mask_cells, render_maps

        maps = render_maps(ds.X, layout)
        batch = mask_cells(ds.X, maps, cfg.mask_ratio, seed=3)
        feats = np.ascontiguousarray(batch.masked_features.T)
        x_full = np.ascontiguousarray(ds.X.T)
        neighbors = graph.neighbor_lists()

        def total_loss():
            out = model.forward(feats, batch.masked_maps, graph,
                                training=True, update_running=False)
            recon = sce_loss(x_full, out["x_hat"], batch.mask_set, cfg.gamma)
            z = ad.l2_normalize_rows(out["z_fused"])
            con = contrastive_loss(z, neighbors, cfg.tau)
            return recon + con

        loss = total_loss()
        ad.backward(loss)
        analytic = {k: p.grad.copy() for k, p in model.params.items() if p.grad is not None}
        assert set(analytic) == set(model.params)

        names = list(model.params)
        arrays = [model.params[k].values for k in names]
        fd = finite_difference_grads(lambda: total_loss().item(), arrays, h=1e-4)
        for name, g in zip(names, fd):
            err = relative_error(analytic[name], g)
            assert err < 1e-4, f"{name}: rel err {err}"


class TestTraining:
    def test_loss_decreases_on_toy(self):
        ds, graph, layout = toy_dataset(n=20, p=16, seed=11)
        cfg = ModelConfig(seed=11, epochs=40, **TOY_CFG)
        _, _, log = train(ds, graph, layout, cfg)
        total = [r["loss_recon"] + r["loss_contrastive"] for r in log]
        early = np.mean(total[1:6])
        late = np.mean(total[-5:])
        assert late < early

    def test_cci_only_mode(self):
        ds, graph, layout = toy_dataset(seed=12)
        cfg = ModelConfig(seed=12, epochs=3, cci_only=True, **TOY_CFG)
        model, emb, log = train(ds, graph, None, cfg)
        assert emb.Z_intrinsic is None
        assert emb.Z_spatial.shape == (20, 4)
        assert len(log) == 3

    def test_cci_only_ignores_layout_bit_exact(self):
        ds, graph, layout = toy_dataset(seed=13)
        cfg = ModelConfig(seed=13, epochs=2, cci_only=True, **TOY_CFG)
        _, emb_a, _ = train(ds, graph, None, cfg)
        _, emb_b, _ = train(ds, graph, layout, cfg)
        assert emb_a.Z.tobytes() == emb_b.Z.tobytes()

    def test_zero_epochs_initial_state(self):
        ds, graph, layout = toy_dataset(seed=14)
        cfg = ModelConfig(seed=14, epochs=0, **TOY_CFG)
        model, emb, log = train(ds, graph, layout, cfg)
        assert log == []
        again = embed(model, ds, graph, layout)
        assert emb.Z.tobytes() == again.Z.tobytes()

    def test_embed_deterministic(self):
        ds, graph, layout = toy_dataset(seed=15)
        cfg = ModelConfig(seed=15, epochs=2, **TOY_CFG)
        model, emb, _ = train(ds, graph, layout, cfg)
        twice = embed(model, ds, graph, layout)
        assert emb.Z_spatial.tobytes() == twice.Z_spatial.tobytes()
        assert emb.Z.tobytes() == twice.Z.tobytes()

    def test_embed_permutation_equivariance(self):
        ds, graph, layout = toy_dataset(seed=16)
        cfg = ModelConfig(seed=16, epochs=2, **TOY_CFG)
        model, emb, _ = train(ds, graph, layout, cfg)

        rng = np.random.default_rng(1)
        perm = rng.permutation(ds.n_cells)
        inv = {int(old): new for new, old in enumerate(perm)}
        ds_p = ds.copy()
        ds_p.X = ds.X[:, perm]
        ds_p.coords = ds.coords[:, perm]
        ds_p.cell_ids = [ds.cell_ids[i] for i in perm]
        remapped = np.array(
            sorted(sorted((inv[int(i)], inv[int(j)])) for i, j in graph.edges)
        )
        graph_p = SpatialGraph(graph.n_nodes, remapped, np.ones(len(remapped)))
        emb_p = embed(model, ds_p, graph_p, layout)
        np.testing.assert_allclose(emb_p.Z_spatial, emb.Z_spatial[perm], atol=1e-9)

    def test_fused_rows_unit_norm(self):
        ds, graph, layout = toy_dataset(seed=17)
        cfg = ModelConfig(seed=17, epochs=2, **TOY_CFG)
        _, emb, _ = train(ds, graph, layout, cfg)
        np.testing.assert_allclose(np.linalg.norm(emb.Z, axis=1), 1.0, atol=1e-9)

    def test_log_schema_and_lr_schedule(self):
        ds, graph, layout = toy_dataset(seed=18)
        cfg = ModelConfig(seed=18, epochs=3, **TOY_CFG)
        _, _, log = train(ds, graph, layout, cfg)
        assert [r["epoch"] for r in log] == [0, 1, 2]
        assert all(r["lr"] == cfg.learning_rate for r in log)
