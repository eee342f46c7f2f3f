import numpy as np
import pytest

from stpam import autodiff as ad
from stpam.attention import class_score
from stpam.autodiff import Tape, Tensor
from stpam.graph import GraphSpec, temporal_adjacency
from stpam.layers import ChebConvLayer, FcLayer
from stpam.model import STPAM
from stpam.objective import (Adam, OptimizerError, _kl_tensor, expert_ce_loss, kl_losses, loss_gradients,
                             total_loss)

from conftest import SMALL_CHANNELS, fd_grad, rel_err, small_config


def clone_expert(model, src=0, dst=1):
    for group in (model.spatial, model.temporal):
        a, b = group[src].parameters(), group[dst].parameters()
        for (na, pa), (nb, pb) in zip(a.items(), b.items()):
            pb.data = pa.data.copy()


@pytest.fixture
def data():
    rng = np.random.default_rng(0)
    return rng.standard_normal((6, len(SMALL_CHANNELS), 64)), np.array([0, 1, 0, 1, 1, 0])


class TestCrossEntropy:
    def test_uniform(self):
        assert expert_ce_loss(np.full((4, 2), 0.5), [0, 1, 1, 0]) == pytest.approx(0.693147, abs=1e-6)

    def test_perfect(self):
        assert expert_ce_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == 0.0

    def test_hand_value(self):
        assert expert_ce_loss(np.array([[0.9, 0.1]]), [1]) == pytest.approx(2.302585, abs=1e-6)

    def test_floor(self):
        assert expert_ce_loss(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-np.log(1e-12))

    def test_label_range(self):
        with pytest.raises(ValueError):
            expert_ce_loss(np.full((1, 2), 0.5), [2])


class TestKlLosses:
    def test_identical_maps(self):
        rng = np.random.default_rng(1)
        s, t = rng.random((3, 4, 5)), rng.random((3, 4))
        assert kl_losses([(s, s)], [(t, t)]) == (1.0, 1.0)

    def test_ln2_gives_half(self):
        p = np.tile([1.0, 0.0], (5, 1))
        q = np.tile([0.5, 0.5], (5, 1))
        _, kt = kl_losses([], [(p, q)])
        assert kt == pytest.approx(0.5, abs=1e-7)

    def test_spatial_maps_average_slices_first(self):
        # each slice is one-hot on a different node, but the slice average is uniform
        p = np.eye(3)[None]
        q = np.full((1, 3, 3), 1.0)
        ks, _ = kl_losses([(p, q)], [])
        assert ks == pytest.approx(1.0, abs=1e-12)

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            ks, kt = kl_losses([(rng.random((2, 3, 6)) * 5, rng.random((2, 3, 6)))],
                               [(rng.random((2, 4)), rng.random((2, 4)) * 3)])
            assert 0 < ks <= 1 and 0 < kt <= 1

    def test_mismatch(self):
        with pytest.raises(Exception):
            kl_losses([(np.ones((1, 2, 3)), np.ones((1, 2, 4)))], [])

    def test_tensor_matches_numpy(self):
        rng = np.random.default_rng(3)
        s = [rng.random((4, 3, 6)) for _ in range(2)]
        t = [rng.random((4, 5)) for _ in range(2)]
        ks, kt = kl_losses([tuple(s)], [tuple(t)])
        assert _kl_tensor([(Tensor(s[0]), Tensor(s[1]))], True).item() == pytest.approx(ks, abs=1e-14)
        assert _kl_tensor([(Tensor(t[0]), Tensor(t[1]))], False).item() == pytest.approx(kt, abs=1e-14)


class TestTotalLoss:
    def test_gamma_zero(self, small_layout, data):
        X, y = data
        m = STPAM(small_config(), small_layout)
        b = total_loss(m, m.forward(X, y, training=True), y, gamma=0.0).breakdown
        assert b.total == b.lc + b.ls + b.lt
        assert abs(b.total - (b.lc + b.ls + b.lt)) <= 1e-12

    def test_unit_penalties_contribute_002(self, small_layout, data):
        X, y = data
        m = STPAM(small_config(epsilon=0.0), small_layout)
        clone_expert(m)
        b = total_loss(m, m.forward(X, y, training=True), y, gamma=0.01).breakdown
        assert b.kl_s == 1.0 and b.kl_t == 1.0
        assert abs((b.total - (b.lc + b.ls + b.lt)) - 0.02) <= 1e-12

    def test_breakdown_matches_numpy_pieces(self, small_layout, data):
        X, y = data
        m = STPAM(small_config(), small_layout)
        tr = m.forward(X, y, training=True)
        b = total_loss(m, tr, y).breakdown
        assert b.lc == pytest.approx(expert_ce_loss(tr.probs.data, y), abs=1e-12)
        assert b.ls == pytest.approx(sum(expert_ce_loss(p.data, y) for p in tr.spatial_probs), abs=1e-12)
        ks, kt = kl_losses([(tr.spatial_heat[0].data, tr.spatial_heat[1].data)],
                           [(tr.temporal_heat[0].data, tr.temporal_heat[1].data)])
        assert (b.kl_s, b.kl_t) == (pytest.approx(ks, abs=1e-12), pytest.approx(kt, abs=1e-12))
        assert b.gamma == 0.01 and b.lc >= 0 and b.ls >= 0 and b.lt >= 0

    def test_extra_pairs_add_up(self, small_layout, data):
        X, y = data
        m = STPAM(small_config(kl_pairs=[[0, 1], [1, 2]]), small_layout)
        tr = m.forward(X, y, training=True)
        assert set(tr.spatial_heat) == {0, 1, 2}
        b = total_loss(m, tr, y).breakdown
        ks, _ = kl_losses([(tr.spatial_heat[0].data, tr.spatial_heat[1].data),
                           (tr.spatial_heat[1].data, tr.spatial_heat[2].data)], [])
        assert b.kl_s == pytest.approx(ks, abs=1e-12)

    def test_stm_has_no_penalty(self, small_layout, data):
        from stpam.model import build_variant
        X, y = data
        m = build_variant("stm", small_config(), small_layout)
        b = total_loss(m, m.forward(X, y, training=True), y).breakdown
        assert b.kl_s == 0.0 and b.kl_t == 0.0


class TestGradientPartitions:
    def test_penalty_reaches_only_gcn_weights(self, small_layout, data):
        X, y = data
        m = STPAM(small_config(), small_layout)
        _, g0 = loss_gradients(m, m.forward(X, y, training=True), y, gamma=0.0)
        _, g1 = loss_gradients(m, m.forward(X, y, training=True), y, gamma=1.0)
        gcn = set(m.gcn_parameters())
        changed = {n for n in g0 if not np.array_equal(g0[n], g1[n])}
        assert changed and changed <= gcn
        assert any(n.startswith("psl.") for n in changed) and any(n.startswith("ptl.") for n in changed)

    def test_all_scope_reaches_more(self, small_layout, data):
        X, y = data
        m = STPAM(small_config(kl_scope="all"), small_layout)
        _, g0 = loss_gradients(m, m.forward(X, y, training=True), y, gamma=0.0)
        _, g1 = loss_gradients(m, m.forward(X, y, training=True), y, gamma=1.0)
        changed = {n for n in g0 if not np.array_equal(g0[n], g1[n])}
        assert changed - set(m.gcn_parameters())

    def test_gamma_zero_scopes_agree(self, small_layout, data):
        X, y = data
        a = STPAM(small_config(), small_layout)
        b = STPAM(small_config(kl_scope="all"), small_layout)
        _, ga = loss_gradients(a, a.forward(X, y, training=True), y, gamma=0.0)
        _, gb = loss_gradients(b, b.forward(X, y, training=True), y, gamma=0.0)
        for n in ga:
            np.testing.assert_allclose(ga[n], gb[n], atol=1e-13)


def toy_experts(seed=0):
    g = GraphSpec.build(temporal_adjacency(5), 2)
    experts = [(ChebConvLayer(g, 3, 4, f"e{i}.gcn", seed + i), FcLayer(20, 2, f"e{i}.head", seed + i))
               for i in range(2)]
    X = np.random.default_rng(seed).standard_normal((4, 5, 3))
    return experts, X


def frozen_alphas(experts, X, labels):
    out = []
    for gcn, head in experts:
        with Tape() as tape:
            h = gcn(Tensor(X))
            probs = ad.softmax(head(ad.flatten(h, start=1)))
            out.append(tape.grad_of_intermediate(class_score(probs, labels), h).data.mean(axis=-2, keepdims=True))
    return out


def penalty_with_alphas(experts, X, alphas):
    heats = []
    for (gcn, _), a in zip(experts, alphas):
        h = gcn(Tensor(X))
        heats.append(ad.sum(ad.relu(ad.mask_mul(h, np.broadcast_to(a, h.shape))), axis=-1))
    return _kl_tensor([tuple(heats)], spatial=False)


class TestPenaltyDirection:
    def test_penalty_gradient_matches_fd_with_alpha_frozen(self):
        experts, X = toy_experts(1)
        alphas = frozen_alphas(experts, X, [0, 1, 1, 0])
        params = {**experts[0][0].parameters(), **experts[1][0].parameters()}
        with Tape() as tape:
            pen = penalty_with_alphas(experts, X, alphas)
        grads = tape.backward(pen, wrt=list(params.values()))
        for p in params.values():
            base = p.data.copy()

            def f(arr):
                p.data = arr
                return penalty_with_alphas(experts, X, alphas).item()

            fd = fd_grad(f, [base], 0)
            p.data = base
            assert rel_err(grads[p], fd) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_step_on_gcn_weights_raises_divergence(self, seed):
        experts, X = toy_experts(seed)
        alphas = frozen_alphas(experts, X, [0, 1, 1, 0])
        params = {**experts[0][0].parameters(), **experts[1][0].parameters()}
        with Tape() as tape:
            before = penalty_with_alphas(experts, X, alphas)
        grads = tape.backward(before, wrt=list(params.values()))
        for p in params.values():
            p.data = p.data - 1e-3 * grads[p]
        after = penalty_with_alphas(experts, X, alphas).item()
        # penalty = mean exp(-D); a smaller penalty means larger divergence
        assert after <= before.item()


class TestAdam:
    def test_first_step(self):
        p = Tensor([1.0], requires_grad=True)
        opt = Adam(lr=0.003)
        opt.step({"p": p}, {"p": np.array([0.5])})
        delta = p.data[0] - 1.0
        assert delta == pytest.approx(-0.003 * (1 - 2e-8), rel=1e-12)
        assert opt.step_count == 1

    def test_zero_gradient(self):
        p = Tensor([2.0, -1.0], requires_grad=True)
        opt = Adam()
        opt.step({"p": p}, {"p": np.array([1.0, 1.0])})
        m_before, v_before, value = opt.m["p"].copy(), opt.v["p"].copy(), p.data.copy()
        opt2 = Adam()
        q = Tensor([2.0, -1.0], requires_grad=True)
        opt2.step({"q": q}, {"q": np.zeros(2)})
        np.testing.assert_array_equal(q.data, [2.0, -1.0])
        opt.step({"p": p}, {"p": np.zeros(2)})
        np.testing.assert_allclose(opt.m["p"], 0.9 * m_before)
        np.testing.assert_allclose(opt.v["p"], 0.999 * v_before)
        assert not np.array_equal(p.data, value)  # momentum still moves it

    def test_missing_gradient(self):
        with pytest.raises(OptimizerError):
            Adam().step({"p": Tensor([1.0])}, {})

    def test_shape_mismatch(self):
        with pytest.raises(OptimizerError):
            Adam().step({"p": Tensor([1.0])}, {"p": np.ones(2)})

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(beta1=1.0), dict(max_norm=-1.0)])
    def test_bad_settings(self, kw):
        with pytest.raises(OptimizerError):
            Adam(**kw)

    def test_clipping(self):
        p = Tensor([0.0, 0.0], requires_grad=True)
        opt = Adam(lr=1.0, max_norm=1.0)
        opt.step({"p": p}, {"p": np.array([30.0, 40.0])})
        np.testing.assert_allclose(opt.m["p"], 0.1 * np.array([0.6, 0.8]))

    def test_deterministic_ten_steps(self, small_layout, data):
        X, y = data
        runs = []
        for _ in range(2):
            m = STPAM(small_config(seed=4), small_layout)
            opt = Adam()
            params = m.parameters()
            for _ in range(10):
                _, g = loss_gradients(m, m.forward(X, y, training=True), y)
                opt.step(params, g)
            runs.append({n: p.data.copy() for n, p in params.items()})
        for n in runs[0]:
            np.testing.assert_array_equal(runs[0][n], runs[1][n])


class TestOptimizationSanity:
    def test_loss_falls_over_fifty_full_batch_steps(self, small_layout):
        outcomes = []
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            X = rng.standard_normal((8, len(SMALL_CHANNELS), 64))
            y = np.array([0, 1] * 4)
            m = STPAM(small_config(seed=seed), small_layout)
            opt = Adam()
            params = m.parameters()
            first = last = None
            for _ in range(50):
                b, g = loss_gradients(m, m.forward(X, y, training=True), y)
                first = b.total if first is None else first
                last = b.total
                opt.step(params, g)
            outcomes.append(last <= first)
        assert sum(outcomes) >= 9
