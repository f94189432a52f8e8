"""Autoencoder, near-greedy set, similarity weights and the weighted target."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsim_lab.batch import TransitionBatch
from qsim_lab.tensor_nn import Tensor, backward, no_grad
from qsim_lab.qsim_target import (
    ActionEncoder,
    KappaSchedule,
    SimilarityWeights,
    ae_loss,
    build_near_greedy,
    candidate_actions,
    candidate_values,
    cosine_rows,
    encode,
    export_embeddings,
    kappa_schedule,
    qsim_target,
    similarity_weights,
    softmax_weights,
    survival_mask,
)
from qsim_lab.vd_core import NetworkPair, VDModel, greedy_td_target

from test_vd_core import table_model


def small_encoder(seed=0, use_state=True, n_agents=2, obs_dim=3, state_dim=4, n_actions=3):
    return ActionEncoder(n_agents, obs_dim, state_dim, n_actions, np.random.default_rng(seed), hidden=8,
                         embed_dim=4, use_state=use_state)


def random_batch(rng, m=5, n=2, o=3, s=4, a=3, terminal=None):
    return TransitionBatch(
        state=rng.normal(size=(m, s)), obs=rng.normal(size=(m, n, o)), avail=np.ones((m, n, a), bool),
        actions=rng.integers(a, size=(m, n)), reward=rng.normal(size=m), next_state=rng.normal(size=(m, s)),
        next_obs=rng.normal(size=(m, n, o)), next_avail=np.ones((m, n, a), bool),
        terminal=np.zeros(m, bool) if terminal is None else np.asarray(terminal),
    )


class ConstEncoder:
    """Stand-in encoder with a fixed embedding per action (ignores context)."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)  # (A, d)
        self.n_actions = self.table.shape[0]

    def embed(self, obs, state, actions):
        return Tensor(self.table[np.asarray(actions)])


class TestEncoder:
    def test_deterministic(self):
        enc = small_encoder()
        obs, s = np.arange(3.0), np.arange(4.0)
        assert encode(enc, obs, s, 1).tobytes() == encode(enc, obs, s, 1).tobytes()

    def test_zero_encoder(self):
        enc = small_encoder()
        for p in enc.params.values():
            p.data[...] = 0
        np.testing.assert_array_equal(encode(enc, np.ones(3), np.ones(4), 2), np.zeros(4))

    def test_documented_assembly(self):
        enc = small_encoder(3)
        obs, s, a = np.array([0.1, -0.2, 0.3]), np.array([1.0, 0.0, -1.0, 0.5]), 2
        relu = lambda v: np.maximum(v, 0)
        P = {k: v.data for k, v in enc.params.items()}
        h_ctx = relu(np.concatenate([obs, s]) @ P["enc.ctx.0.weight"] + P["enc.ctx.0.bias"])
        h_act = relu(np.eye(3)[a] @ P["enc.act.0.weight"] + P["enc.act.0.bias"])
        h = relu(np.concatenate([h_ctx, h_act]) @ P["enc.fuse.0.weight"] + P["enc.fuse.0.bias"])
        f = h @ P["enc.fuse.1.weight"] + P["enc.fuse.1.bias"]
        np.testing.assert_allclose(encode(enc, obs, s, a), f, rtol=0, atol=1e-14)

    def test_state_excluded_without_use_state(self):
        enc = small_encoder(use_state=False)
        obs = np.ones(3)
        np.testing.assert_array_equal(encode(enc, obs, np.zeros(4), 0), encode(enc, obs, 100 * np.ones(4), 0))

    def test_bad_action(self):
        with pytest.raises(ValueError):
            encode(small_encoder(), np.ones(3), np.ones(4), 3)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            encode(small_encoder(), np.ones(2), np.ones(4), 0)


class TestAeLoss:
    def test_matches_composition(self):
        rng = np.random.default_rng(1)
        enc, batch = small_encoder(1), random_batch(rng)
        total = 0.0
        for k in range(len(batch)):
            f = np.concatenate([encode(enc, batch.obs[k, i], batch.state[k], batch.actions[k, i]) for i in range(2)])
            with no_grad():
                pred = enc.predict(f[None]).data[0]
            total += np.sum((pred - batch.next_obs[k].reshape(-1)) ** 2)
        assert float(ae_loss(enc, batch).data) == pytest.approx(total / len(batch), rel=1e-12)

    def test_all_ones_error(self):
        rng = np.random.default_rng(2)
        enc, batch = small_encoder(2), random_batch(rng, m=1)
        with no_grad():
            f = enc.embed(batch.obs[0], np.repeat(batch.state, 2, 0), batch.actions[0]).data.reshape(1, -1)
            pred = enc.predict(f).data
        batch.next_obs = (pred - 1.0).reshape(1, 2, 3)
        assert float(ae_loss(enc, batch).data) == pytest.approx(6.0, abs=1e-12)
        batch.next_obs = pred.reshape(1, 2, 3)
        assert float(ae_loss(enc, batch).data) == pytest.approx(0.0, abs=1e-20)

    def test_gradients_reach_encoder_and_predictor(self):
        enc = small_encoder(3)
        backward(ae_loss(enc, random_batch(np.random.default_rng(3))))
        assert enc.params["enc.ctx.0.weight"].grad is not None
        assert enc.params["pred.1.weight"].grad is not None


class TestNearGreedy:
    def test_two_agents_full(self):
        s = build_near_greedy((0, 0), np.ones((2, 3), bool))
        assert [e[2] for e in s.entries] == [(0, 0), (1, 0), (2, 0), (0, 0), (0, 1), (0, 2)]
        assert [(e[0], e[1]) for e in s.entries] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]

    def test_single_agent(self):
        s = build_near_greedy((1,), np.ones((1, 4), bool))
        assert [e[2] for e in s.entries] == [(0,), (1,), (2,), (3,)]

    def test_mask_removes_entry(self):
        masks = np.ones((2, 3), bool)
        masks[1, 2] = False
        assert len(build_near_greedy((0, 0), masks)) == 5

    def test_unavailable_anchor(self):
        masks = np.ones((2, 3), bool)
        masks[0, 1] = False
        with pytest.raises(ValueError):
            build_near_greedy((1, 0), masks)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 10**6))
    def test_entries_deviate_in_one_coordinate(self, n, a, seed):
        u = np.random.default_rng(seed).integers(a, size=n)
        s = build_near_greedy(u, np.ones((n, a), bool))
        assert len(s) == n * a
        for i, j, c in s.entries:
            diff = [k for k in range(n) if c[k] != u[k]]
            assert diff in ([], [i]) and c[i] == j
        cand = candidate_actions(u, a)
        assert [tuple(x) for x in cand.reshape(-1, n)] == [e[2] for e in s.entries]


class TestSimilarityWeights:
    def test_hand_softmax(self):
        S = np.array([[1.0, 0.5, -0.2]])
        keep = survival_mask(S, np.ones((1, 3), bool), np.array([0]), 0.0)
        w = softmax_weights(S, keep, 3.0)
        e3, e15 = math.exp(3), math.exp(1.5)
        np.testing.assert_allclose(w, [[e3 / (e3 + e15), e15 / (e3 + e15), 0.0]], rtol=1e-14)
        np.testing.assert_allclose(w[0, :2], [0.8176, 0.1824], atol=5e-5)

    def test_identical_embeddings_uniform(self):
        enc = ConstEncoder(np.ones((4, 3)))
        sim = similarity_weights(enc, np.zeros((1, 2, 1)), np.zeros((1, 1)), np.array([[1, 2]]), np.ones((1, 2, 4), bool), 7.0)
        np.testing.assert_array_equal(sim.S, 1.0)
        np.testing.assert_allclose(sim.w, 0.25)

    def test_kappa_zero_uniform(self):
        S = np.random.default_rng(0).uniform(0, 1, size=(3, 4))
        w = softmax_weights(S, np.ones((3, 4), bool), 0.0)
        np.testing.assert_array_equal(w, 0.25)

    def test_unavailable_excluded(self):
        S = np.ones((1, 3))
        valid = np.array([[True, False, True]])
        np.testing.assert_array_equal(survival_mask(S, valid, np.array([0])), valid)

    def test_anchor_always_survives(self):
        S = np.array([[-0.5, 0.9]])
        keep = survival_mask(S, np.ones((1, 2), bool), np.array([0]), threshold=0.95)
        np.testing.assert_array_equal(keep, [[True, False]])

    def test_top_n_after_threshold(self):
        S = np.array([[1.0, 0.2, 0.9, 0.95, -0.1]])
        keep = survival_mask(S, np.ones((1, 5), bool), np.array([0]), 0.0, top_n=3)
        np.testing.assert_array_equal(keep, [[True, False, True, True, False]])
        keep = survival_mask(S, np.ones((1, 5), bool), np.array([0]), 0.0, top_n=1)
        np.testing.assert_array_equal(keep, [[True, False, False, False, False]])

    def test_top_n_prefers_anchor_on_ties(self):
        S = np.array([[1.0, 1.0, 1.0]])
        keep = survival_mask(S, np.ones((1, 3), bool), np.array([2]), 0.0, top_n=1)
        np.testing.assert_array_equal(keep, [[False, False, True]])

    def test_cosine_zero_norm(self):
        out = cosine_rows(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 2.0]]))
        np.testing.assert_array_equal(out, [0.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.floats(0, 20), st.floats(-1, 1), st.integers(0, 10**6))
    def test_convex_combination(self, n, a, kappa, threshold, seed):
        rng = np.random.default_rng(seed)
        S = rng.uniform(-1, 1, size=(n, a))
        anchor = rng.integers(a, size=n)
        S[np.arange(n), anchor] = 1.0
        valid = rng.random((n, a)) < 0.7
        valid[np.arange(n), anchor] = True
        keep = survival_mask(S, valid, anchor, threshold)
        w = softmax_weights(S, keep, kappa)
        sim = SimilarityWeights(S, w, kappa, threshold, None)
        assert (sim.global_weights >= 0).all()
        assert sim.global_weights.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert (w[~keep] == 0).all()

    def test_encoder_cosine_in_range(self):
        enc = small_encoder(5)
        rng = np.random.default_rng(5)
        sim = similarity_weights(enc, rng.normal(size=(6, 2, 3)), rng.normal(size=(6, 4)), rng.integers(3, size=(6, 2)),
                                 np.ones((6, 2, 3), bool), 3.0)
        assert (np.abs(sim.S) <= 1 + 1e-12).all()


class TestQsimTarget:
    TABLES = [[[0.0, 1.0, 5.0], [2.0, 0.0, 0.0]], [[4.0, 0.0, 1.0], [0.0, 3.0, 0.0]]]

    def _batch(self, reward=1.0, terminal=False):
        from test_vd_core import one_row_batch

        return one_row_batch([[1, 0], [1, 0]], reward, terminal)

    def test_terminal_row_is_reward(self):
        pair = NetworkPair.from_main(table_model(self.TABLES))
        y, _ = qsim_target(pair, ConstEncoder(np.eye(3)), self._batch(3.0, True), 0.99, 3.0)
        assert y[0] == 3.0

    def test_hand_computed_two_agents(self):
        pair = NetworkPair.from_main(table_model(self.TABLES))
        # Embeddings per action give S rows relative to the anchor (2, 0).
        emb = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
        y, info = qsim_target(pair, ConstEncoder(emb), self._batch(1.0), 0.9, 3.0)
        assert tuple(info["anchor"][0]) == (2, 0)
        u0 = np.array([0.0, 1.0, 5.0])  # agent 0 utilities at obs 0
        u1 = np.array([4.0, 0.0, 1.0])
        # agent 0 deviates, anchor action 2: S = cos(e_j, e_2) = [0, 0.8, 1]
        w0 = np.exp(3 * np.array([0.0, 0.8, 1.0]))
        w0 /= w0.sum()
        q0 = u0 + u1[0]
        # agent 1 deviates, anchor action 0: S = [1, 0.6, 0]
        w1 = np.exp(3 * np.array([1.0, 0.6, 0.0]))
        w1 /= w1.sum()
        q1 = u0[2] + u1
        expected = 1.0 + 0.9 * (np.dot(w0, q0) + np.dot(w1, q1)) / 2
        assert y[0] == pytest.approx(expected, rel=1e-13)

    def test_concentrated_weights_recover_greedy(self):
        rng = np.random.default_rng(0)
        model = VDModel.create(2, 3, 3, 4, rng, "QMIX")
        pair = NetworkPair.from_main(model)
        batch = random_batch(rng, m=8)
        greedy = greedy_td_target(pair, batch, 0.99)
        y, _ = qsim_target(pair, ConstEncoder(np.eye(3)), batch, 0.99, 1e6)
        np.testing.assert_allclose(y, greedy, atol=1e-6)

    def test_kappa_zero_single_agent_mean(self):
        model = table_model([[[1.0, 2.0, 6.0]]], state_dim=1)
        pair = NetworkPair.from_main(model)
        batch = TransitionBatch(
            state=np.zeros((1, 1)), obs=np.ones((1, 1, 1)), avail=np.ones((1, 1, 3), bool),
            actions=np.zeros((1, 1), np.int64), reward=np.array([0.0]), next_state=np.zeros((1, 1)),
            next_obs=np.ones((1, 1, 1)), next_avail=np.ones((1, 1, 3), bool), terminal=np.array([False]),
        )
        y, _ = qsim_target(pair, ConstEncoder(np.eye(3)), batch, 1.0, 0.0, threshold=-1.0)
        assert y[0] == pytest.approx(3.0)

    def test_value_never_exceeds_greedy_at_target_anchor(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pair = NetworkPair.from_main(VDModel.create(3, 3, 4, 4, rng, "QMIX"))
            enc = ActionEncoder(3, 3, 4, 4, rng, hidden=8, embed_dim=4)
            batch = random_batch(rng, m=6, n=3, a=4)
            y, info = qsim_target(pair, enc, batch, 0.99, rng.uniform(0, 10), threshold=rng.uniform(-1, 1), double_q=False)
            g = greedy_td_target(pair, batch, 0.99, double_q=False)
            assert (y <= g + 1e-9).all()

    def test_candidate_values_match_direct_mix(self):
        rng = np.random.default_rng(2)
        model = VDModel.create(2, 3, 3, 4, rng, "QMIX")
        batch = random_batch(rng, m=3)
        u = rng.integers(3, size=(3, 2))
        cq = candidate_values(model, batch.next_obs, batch.next_avail, batch.next_state, u)
        cand = candidate_actions(u, 3)
        for k in range(3):
            for i in range(2):
                for j in range(3):
                    with no_grad():
                        direct = model.q_tot(batch.next_obs[k:k + 1], batch.next_avail[k:k + 1], cand[k, i, j][None],
                                             batch.next_state[k:k + 1]).data[0]
                    assert cq[k, i, j] == pytest.approx(direct, abs=1e-12)

    def test_weight_hook(self):
        pair = NetworkPair.from_main(table_model(self.TABLES))
        y1, _ = qsim_target(pair, ConstEncoder(np.eye(3)), self._batch(0.0), 1.0, 3.0)
        y2, _ = qsim_target(pair, ConstEncoder(np.eye(3)), self._batch(0.0), 1.0, 3.0, weight_fn=lambda s: s.w)
        assert y2[0] == pytest.approx(2 * y1[0])


class TestKappaSchedule:
    def test_linear_endpoints(self):
        sched = KappaSchedule("linear", start=1.0, end=10.0, horizon=100)
        assert kappa_schedule(0, sched) == 1.0
        assert kappa_schedule(100, sched) == 10.0 and kappa_schedule(10**6, sched) == 10.0
        assert kappa_schedule(50, sched) == pytest.approx(5.5)

    def test_constant(self):
        assert all(kappa_schedule(t, KappaSchedule()) == 3.0 for t in (0, 7, 10**7))

    def test_negative_step(self):
        with pytest.raises(ValueError):
            kappa_schedule(-1, KappaSchedule())


def test_export_embeddings(tmp_path):
    enc = small_encoder()
    path = export_embeddings(enc, np.zeros((2, 3)), np.zeros(4), tmp_path / "emb.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "agent,action,e0,e1,e2,e3"
    assert len(lines) == 1 + 2 * 3


