import numpy as np
import pytest
from scipy.linalg import expm

from conftest import dense_hops, make_state
from odecf.graph import build_adjacency
from odecf.model import (
    LightGCNState,
    ModelError,
    ModelState,
    SolverConfig,
    SolverError,
    derivative,
    final_embeddings,
    init_embeddings,
    integrate,
    integrate_with_tape,
    lightgcn_forward,
    load_embeddings,
    model_forward,
    predict_scores,
    save_embeddings,
)

from test_graph import simple_ds, zero_adjacency


class TestSolverConfig:
    def test_validation(self):
        with pytest.raises(ModelError):
            SolverConfig(method="midpoint")
        with pytest.raises(ModelError):
            SolverConfig(t1=0.0)
        with pytest.raises(ModelError):
            SolverConfig(steps=0)
        with pytest.raises(ModelError):
            SolverConfig(n_hops=0)
        assert SolverConfig(t1=0.8, steps=4).step_size == pytest.approx(0.2)

    def test_state_weight_consistency(self):
        adj = build_adjacency(simple_ds([[0]], 1))
        e0 = np.zeros((2, 2))
        with pytest.raises(ModelError):
            ModelState(e0=e0, hop_weights=np.ones(2), adjacency=adj,
                       solver=SolverConfig(n_hops=2))
        with pytest.raises(ModelError):
            ModelState(e0=e0, hop_weights=None, adjacency=adj,
                       solver=SolverConfig(n_hops=2, use_weights=True))


class TestDerivative:
    def test_zero_adjacency_negates(self):
        adj = zero_adjacency(4, 2)
        e0 = np.random.default_rng(0).normal(size=(4, 3))
        state = ModelState.create(e0, adj, SolverConfig(n_hops=1))
        assert np.array_equal(derivative(e0, state), -e0)

    def test_eigenvector_scaling(self, small_adj):
        lam, vecs = np.linalg.eigh(small_adj.to_dense())
        k = np.argmax(np.abs(lam))  # well-separated leading eigenpair
        emb = np.tile(vecs[:, k : k + 1], (1, 3))
        state = ModelState(e0=emb, hop_weights=None, adjacency=small_adj,
                           solver=SolverConfig(n_hops=1))
        out = derivative(emb, state)
        assert np.abs(out - (lam[k] - 1.0) * emb).max() < 1e-12

    def test_weighted_two_hops_vs_dense_oracle(self, small_ds):
        state = make_state(small_ds, n_hops=2, use_weights=True, seed=5)
        state.hop_weights[:] = [1.3, 0.8]
        dense = state.adjacency.to_dense()
        g = derivative(state.e0, state)
        oracle = dense_hops(dense, state.e0, 2, [1.3, 0.8]) - state.e0
        assert np.abs(g - oracle).max() < 1e-12

    def test_algebraic_identity_any_input(self, small_ds):
        # g(E) = P(E) - E for arbitrary E, not only the trained state
        state = make_state(small_ds, n_hops=3)
        rng = np.random.default_rng(8)
        emb = rng.normal(size=state.e0.shape)
        dense = state.adjacency.to_dense()
        expected = np.linalg.matrix_power(dense, 3) @ emb - emb
        assert np.abs(derivative(emb, state) - expected).max() < 1e-12

    def test_dimension_mismatch(self, small_ds):
        state = make_state(small_ds)
        with pytest.raises(ModelError):
            derivative(np.zeros((3, 4)), state)


class TestIntegrate:
    def test_zero_length_integration(self, small_ds):
        state = make_state(small_ds, t1=1e-30, steps=1, n_hops=1)
        assert np.abs(integrate(state) - state.e0).max() < 1e-12

    def test_euler_unit_step_is_residual_connection(self, small_ds):
        state = make_state(small_ds, method="euler", t1=1.0, steps=1, n_hops=1, std=1.0)
        dense = state.adjacency.to_dense()
        residual = state.e0 + (dense @ state.e0 - state.e0)
        assert np.abs(integrate(state) - residual).max() <= 1e-15

    @pytest.mark.parametrize("n_hops", [1, 2])
    def test_rk4_converges_to_matrix_exponential(self, small_ds, n_hops):
        # tolerance derived from the RK4 stability function: one step of size h
        # on a mode z=lambda*h errs by |R4(z)-e^z| <= |z|^5/120, |lambda|<=2
        state = make_state(small_ds, method="rk4", t1=0.9, steps=1, n_hops=n_hops, std=1.0)
        dense = state.adjacency.to_dense()
        gen = np.linalg.matrix_power(dense, n_hops) - np.eye(state.adjacency.n_nodes)
        exact = expm(gen * 0.9) @ state.e0
        bound = (2 * 0.9) ** 5 / 120 * np.abs(state.e0).max() * state.e0.shape[0]
        assert np.abs(integrate(state) - exact).max() < bound
        fine = make_state(small_ds, method="rk4", t1=0.9, steps=100, n_hops=n_hops, std=1.0)
        assert np.abs(integrate(fine) - exact).max() < 1e-8

    def test_high_resolution_euler_matches_exact(self, small_ds):
        state = make_state(small_ds, method="euler", t1=0.7, steps=100000, n_hops=1, std=1.0)
        dense = state.adjacency.to_dense()
        exact = expm((dense - np.eye(dense.shape[0])) * 0.7) @ state.e0
        assert np.abs(integrate(state) - exact).max() < 1e-4

    def test_homogeneity(self, small_ds):
        base = make_state(small_ds, method="rk4", steps=2, n_hops=2, std=1.0)
        scaled = ModelState.create(2.7 * base.e0, base.adjacency, base.solver)
        assert np.abs(integrate(scaled) - 2.7 * integrate(base)).max() < 1e-10

    def test_unit_weights_match_weightless_bitwise(self, small_ds):
        for method in ("euler", "rk4"):
            plain = make_state(small_ds, method=method, steps=2, n_hops=2)
            weighted = make_state(small_ds, method=method, steps=2, n_hops=2,
                                  use_weights=True)
            assert np.array_equal(integrate(weighted), integrate(plain))

    @pytest.mark.parametrize("method,nominal", [("euler", 1.0), ("rk4", 4.0)])
    def test_convergence_order(self, small_ds, method, nominal):
        # measured in the asymptotic regime (small t1); the spectrum of the
        # generator reaches -2, so |z| must stay well below 1 at steps=1
        t1 = 0.2
        state = make_state(small_ds, method=method, t1=t1, steps=1, n_hops=1, std=1.0)
        dense = state.adjacency.to_dense()
        exact = expm((dense - np.eye(dense.shape[0])) * t1) @ state.e0
        errs = []
        for steps in (1, 2, 4, 8):
            st = make_state(small_ds, method=method, t1=t1, steps=steps, n_hops=1, std=1.0)
            errs.append(np.abs(integrate(st) - exact).max())
        slope = -np.polyfit(np.log2([1, 2, 4, 8]), np.log2(errs), 1)[0]
        assert abs(slope - nominal) < 0.3

    def test_divergence_raises(self, small_ds):
        # h=100 amplifies the -2 spectral mode by ~199 per step, overflowing
        # float64 midway through the grid
        state = make_state(small_ds, method="euler", t1=20000.0, steps=200,
                           n_hops=1, std=1.0)
        with pytest.raises(SolverError, match="divergent"):
            integrate(state)

    def test_tape_records_final_and_stages(self, small_ds):
        state = make_state(small_ds, method="rk4", steps=3, n_hops=2, use_weights=True)
        fe, tape = integrate_with_tape(state)
        assert np.array_equal(fe, tape.e_final)
        assert len(tape.stage_hops) == 3
        assert all(len(stages) == 4 for stages in tape.stage_hops)
        assert all(len(hops) == 2 for stages in tape.stage_hops for hops in stages)


class TestLightGCN:
    def test_zero_layers(self, small_adj):
        e0 = np.random.default_rng(0).normal(size=(small_adj.n_nodes, 3))
        out = lightgcn_forward(e0, small_adj, 0)
        assert np.array_equal(out, 1.0 * e0)
        out = lightgcn_forward(e0, small_adj, 0, [0.4])
        assert np.array_equal(out, 0.4 * e0)

    def test_matches_dense_oracle(self, small_adj):
        e0 = np.random.default_rng(1).normal(size=(small_adj.n_nodes, 4))
        dense = small_adj.to_dense()
        out = lightgcn_forward(e0, small_adj, 2)
        oracle = (e0 + dense @ e0 + dense @ (dense @ e0)) / 3.0
        assert np.abs(out - oracle).max() < 1e-12

    def test_zero_adjacency_keeps_layer_zero_only(self):
        adj = zero_adjacency(6, 3)
        e0 = np.random.default_rng(2).normal(size=(6, 2))
        w = np.array([0.25, 0.25, 0.25, 0.25])
        assert np.array_equal(lightgcn_forward(e0, adj, 3, w), 0.25 * e0)

    def test_weight_length_checked(self, small_adj):
        e0 = np.zeros((small_adj.n_nodes, 2))
        with pytest.raises(ModelError):
            lightgcn_forward(e0, small_adj, 2, [0.5, 0.5])

    def test_state_forward_dispatch(self, small_adj):
        e0 = np.random.default_rng(3).normal(size=(small_adj.n_nodes, 3))
        state = LightGCNState.create(e0, small_adj, 2)
        fe, tape = model_forward(state, record_tape=True)
        assert np.array_equal(fe, lightgcn_forward(e0, small_adj, 2))
        assert np.array_equal(tape.e_final, fe)
        assert np.array_equal(final_embeddings(state), fe)


class TestPredictScores:
    def test_unit_and_orthogonal(self):
        fe = np.zeros((4, 3))
        fe[0] = [1.0, 0.0, 0.0]
        fe[2] = [1.0, 0.0, 0.0]  # item 0 aligned with user 0
        fe[3] = [0.0, 1.0, 0.0]  # item 1 orthogonal
        scores = predict_scores(fe, 2, 0, [0, 1])
        assert scores[0] == 1.0 and scores[1] == 0.0

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(4)
        fe = rng.normal(size=(9, 5))
        items = np.array([0, 2, 3])
        scores = predict_scores(fe, 4, 2, items)
        for k, i in enumerate(items):
            manual = sum(fe[2, d] * fe[4 + i, d] for d in range(5))
            assert abs(scores[k] - manual) < 1e-12

    def test_out_of_range(self):
        fe = np.zeros((4, 2))
        with pytest.raises(ModelError):
            predict_scores(fe, 2, 2, [0])
        with pytest.raises(ModelError):
            predict_scores(fe, 2, 0, [5])


class TestInitEmbeddings:
    def test_seed_determinism(self):
        a = init_embeddings(50, 8, 0.1, 123)
        b = init_embeddings(50, 8, 0.1, 123)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, init_embeddings(50, 8, 0.1, 124))

    def test_sample_std(self):
        emb = init_embeddings(10000, 100, 0.1, 7)
        assert 0.099 <= emb.std() <= 0.101
        assert abs(emb.mean()) < 5 * 0.1 / np.sqrt(emb.size)

    def test_validation(self):
        with pytest.raises(ModelError):
            init_embeddings(10, 0, 0.1, 0)
        with pytest.raises(ModelError):
            init_embeddings(10, 4, 0.0, 0)


class TestSnapshotIO:
    def test_text_round_trip_lossless(self, tmp_path):
        emb = np.random.default_rng(5).normal(size=(7, 3))
        path = tmp_path / "snap.emb"
        save_embeddings(path, emb)
        header = path.read_text().splitlines()[0]
        assert header == "7 3"
        assert np.array_equal(load_embeddings(path), emb)

    def test_binary_round_trip(self, tmp_path):
        emb = np.random.default_rng(6).normal(size=(11, 4))
        path = tmp_path / "snap.bin"
        save_embeddings(path, emb, binary=True)
        assert np.array_equal(load_embeddings(path), emb)

    def test_truncated_binary_detected(self, tmp_path):
        emb = np.ones((3, 3))
        path = tmp_path / "snap.bin"
        save_embeddings(path, emb, binary=True)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ModelError, match="truncated"):
            load_embeddings(path)
