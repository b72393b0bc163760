"""Learned layers: damping operators, message transforms, trajectory head."""

import numpy as np
import pytest

from bpnn import (
    BpConfig,
    FactorDecl,
    FactorGraphError,
    apply_isomorphism,
    bethe_ln_z,
    brute_force_ln_z,
    build_factor_graph,
    compute_beliefs,
    init_messages,
    load_checkpoint,
    random_factor_graph,
    random_isomorphism,
    random_tree_graph,
    run_bp,
    run_to_convergence,
    save_checkpoint,
    tree_height,
)
from bpnn import propagation as prop
from bpnn.autodiff import Tape, Tensor, backward
from bpnn.estimators import build_bpnn
from bpnn.layers import (
    BpnnLayer,
    BpnnModel,
    DampingOperator,
    Mlp,
    TrajectoryHead,
    init_as_bp,
)


def all_message_arrays(state):
    groups = {}
    for card, tensor in state.fac_to_var_groups.items():
        groups[("f2v", card)] = np.asarray(tensor.value if hasattr(tensor, "value")
                                           else tensor)
    for card, tensor in state.var_to_fac_groups.items():
        groups[("v2f", card)] = np.asarray(tensor.value if hasattr(tensor, "value")
                                           else tensor)
    return groups


def max_state_difference(a, b):
    ga, gb = all_message_arrays(a), all_message_arrays(b)
    assert ga.keys() == gb.keys()
    return max(float(np.max(np.abs(ga[k] - gb[k]))) for k in ga)


def bijection_delta(graph, iso, state_src, state_dst):
    """Max message discrepancy between a run on graph and one on its image."""
    worst = 0.0
    for factor in graph.factors:
        new_fac = iso.factor_perm[factor.index]
        for var in factor.scope:
            new_var = iso.var_perm[var]
            worst = max(worst, float(np.max(np.abs(
                state_src.fac_to_var(factor.index, var)
                - state_dst.fac_to_var(new_fac, new_var)))))
            worst = max(worst, float(np.max(np.abs(
                state_src.var_to_fac(var, factor.index)
                - state_dst.var_to_fac(new_var, new_fac)))))
    return worst


class TestDampingOperator:
    def test_zero_input_maps_to_zero_both_modes(self):
        rng = np.random.default_rng(0)
        zeros = Tensor(np.zeros((5, 3)))
        scalar = DampingOperator.scalar(0.7)
        np.testing.assert_array_equal(scalar.apply(zeros, None).value, np.zeros((5, 3)))
        residual = DampingOperator.residual(Mlp.random("h", [3, 6, 3], rng, scale=2.0))
        np.testing.assert_array_equal(residual.apply(zeros, None).value,
                                      np.zeros((5, 3)))

    def test_scalar_mode_scales(self):
        op = DampingOperator.scalar(0.5)
        out = op.apply(Tensor(np.array([[2.0, -2.0]])), None)
        np.testing.assert_array_equal(out.value, [[1.0, -1.0]])

    def test_residual_applies_same_map_to_every_row(self):
        rng = np.random.default_rng(1)
        op = DampingOperator.residual(Mlp.random("h", [2, 4, 2], rng))
        x = rng.standard_normal((6, 2))
        out = op.apply(Tensor(x), None).value
        perm = rng.permutation(6)
        out_perm = op.apply(Tensor(x[perm]), None).value
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)

    def test_dimension_mismatch_raises(self):
        rng = np.random.default_rng(2)
        op = DampingOperator.residual(Mlp.random("h", [2, 4, 2], rng))
        with pytest.raises(FactorGraphError, match="size"):
            op.apply(Tensor(np.zeros((4, 3))), None)

    def test_linear_init_reproduces_scalar_damping(self):
        net = Mlp.identity("h", 3)
        net.set_linear(0.25 - 1.0)
        op = DampingOperator.residual(net)
        x = np.random.default_rng(3).standard_normal((5, 3))
        np.testing.assert_allclose(op.apply(Tensor(x), None).value, 0.25 * x,
                                   atol=1e-12)


class TestSubsumption:
    @pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 0.9])
    def test_scalar_layer_is_bitwise_equal_to_engine(self, alpha):
        for seed in range(5):
            g = random_factor_graph(5, 6, 3, seed=seed)
            layer = BpnnLayer("damping", operator=DampingOperator.scalar(alpha),
                              var_alpha=alpha)
            s_engine = init_messages(g)
            s_layer = init_messages(g)
            for _ in range(10):
                s_engine, d_e = prop.bp_iteration(
                    g, s_engine, var_alpha=alpha, fac_damp=prop.scalar_damping(alpha))
                s_layer, d_l = layer.step(g, s_layer)
                assert d_e == d_l
            assert max_state_difference(s_engine, s_layer) == 0.0

    def test_convergence_run_matches_engine_trace(self):
        g = random_tree_graph(7, seed=4)
        model = BpnnModel([BpnnLayer("damping", operator=DampingOperator.scalar(0.0),
                                     var_alpha=0.0)], weight_tied=True, unroll=5)
        cfg = BpConfig(alpha=0.0, tol=1e-9, max_iters=60)
        mine = run_to_convergence(g, model, cfg)
        engine = run_bp(g, cfg)
        assert mine.converged and engine.converged
        assert mine.delta_trace == engine.delta_trace


class TestFixedPoints:
    def test_bp_fixed_points_survive_random_operators(self):
        # converge BP hard, then apply one random residual-mode step
        for seed in range(8):
            g = random_factor_graph(5, 6, 3, seed=seed, cards=(2,))
            result = run_bp(g, BpConfig(alpha=0.0, tol=1e-11, max_iters=2000))
            if not result.converged:
                continue
            rng = np.random.default_rng(seed + 100)
            op = DampingOperator.residual(Mlp.random("h", [2, 4, 2], rng, scale=3.0))
            layer = BpnnLayer("damping", operator=op, var_alpha=0.0)
            stepped, delta = layer.step(g, result.messages)
            assert delta <= 1e-7

    def test_converged_states_are_bp_fixed_points(self):
        # a state the learned update cannot move must also be a BP fixed point
        hits = 0
        for seed in range(10):
            g = random_tree_graph(8, seed=seed, cards=(2,))
            op = DampingOperator.random_residual("h", 2, np.random.default_rng(seed),
                                                 scale=0.25, base_alpha=0.5)
            model = BpnnModel([BpnnLayer("damping", operator=op, var_alpha=0.5)],
                              weight_tied=True)
            result = run_to_convergence(g, model, BpConfig(alpha=0.5, tol=1e-9,
                                                           max_iters=500))
            if not result.converged:
                continue
            hits += 1
            _, residual = prop.bp_iteration(g, result.messages, var_alpha=0.0,
                                            fac_damp=prop.scalar_damping(0.0))
            assert residual <= 1e-4
        assert hits >= 5

    def test_tree_convergence_within_height_bound(self):
        for seed in range(15):
            g = random_tree_graph(9, seed=seed, cards=(2,))
            height = tree_height(g)
            op = DampingOperator.random_residual(
                "h", 2, np.random.default_rng(seed + 7), scale=1e-4, base_alpha=0.0)
            model = BpnnModel([BpnnLayer("damping", operator=op, var_alpha=0.0)],
                              weight_tied=True)
            result = run_to_convergence(g, model, BpConfig(alpha=0.5, tol=1e-6,
                                                           max_iters=100))
            assert result.converged
            assert result.iterations_run <= height + 1
            np.testing.assert_allclose(bethe_ln_z(g, result.messages),
                                       brute_force_ln_z(g).ln_z, atol=1e-6)


class TestMessageMlpLayer:
    def test_identity_init_matches_engine(self):
        for seed in range(5):
            g = random_factor_graph(5, 6, 3, seed=seed, cards=(2,))
            nets = {i: Mlp.identity(f"lne{i}", 2) for i in (1, 2, 3, 4)}
            layer = BpnnLayer("message_mlp", alpha=0.5, lne=nets)
            s_layer = init_messages(g)
            s_engine = init_messages(g)
            for _ in range(8):
                s_layer, _ = layer.step(g, s_layer)
                s_engine, _ = prop.bp_iteration(g, s_engine, var_alpha=0.5,
                                                fac_damp=prop.scalar_damping(0.5))
            assert max_state_difference(s_layer, s_engine) <= 1e-9

    def test_identity_mlp_fixes_normalized_messages(self):
        from bpnn.layers import _lne
        net = Mlp.identity("lne", 3)
        logs = np.log(np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]))
        out = _lne(net, Tensor(logs), None)
        np.testing.assert_allclose(out.value, logs, atol=1e-9)

    def test_random_transforms_still_normalize_messages(self):
        rng = np.random.default_rng(5)
        nets = {i: Mlp.random(f"lne{i}", [2, 8, 2], rng) for i in (1, 3)}
        layer = BpnnLayer("message_mlp", alpha=0.5, lne=nets)
        g = random_factor_graph(5, 6, 3, seed=1, cards=(2,))
        state = init_messages(g)
        for _ in range(5):
            state, _ = layer.step(g, state)
        for factor in g.factors:
            for var in factor.scope:
                total = np.exp(state.fac_to_var(factor.index, var)).sum()
                np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_lne_slot_validation(self):
        with pytest.raises(ValueError, match="slot"):
            BpnnLayer("message_mlp", lne={5: Mlp.identity("x", 2)})
        with pytest.raises(ValueError, match="kind"):
            BpnnLayer("mystery")


class TestEquivariance:
    def layer_for(self, kind, seed):
        rng = np.random.default_rng(seed)
        if kind == "bp":
            return None
        if kind == "damping_scalar":
            return BpnnLayer("damping", operator=DampingOperator.scalar(0.5),
                             var_alpha=0.5)
        if kind == "damping_residual":
            return BpnnLayer("damping",
                             operator=DampingOperator.residual(
                                 Mlp.random("h", [2, 4, 2], rng)),
                             var_alpha=0.5)
        nets = {i: Mlp.random(f"lne{i}", [2, 4, 2], rng) for i in (1, 2, 3, 4)}
        return BpnnLayer("message_mlp", alpha=0.5, lne=nets)

    @pytest.mark.parametrize("kind", ["bp", "damping_scalar", "damping_residual",
                                      "message_mlp"])
    def test_message_bijection_under_relabeling(self, kind):
        for seed in range(6):
            g = random_factor_graph(5, 6, 3, seed=seed, cards=(2,))
            iso = random_isomorphism(g, seed=seed + 40)
            h = apply_isomorphism(g, iso)
            layer = self.layer_for(kind, seed)
            sg, sh = init_messages(g), init_messages(h)
            for _ in range(6):
                if layer is None:
                    sg, _ = prop.bp_iteration(g, sg, var_alpha=0.5,
                                              fac_damp=prop.scalar_damping(0.5))
                    sh, _ = prop.bp_iteration(h, sh, var_alpha=0.5,
                                              fac_damp=prop.scalar_damping(0.5))
                else:
                    sg, _ = layer.step(g, sg)
                    sh, _ = layer.step(h, sh)
            assert bijection_delta(g, iso, sg, sh) <= 1e-9

    def test_variable_beliefs_relabel_consistently(self):
        g = random_factor_graph(6, 7, 3, seed=9)
        iso = random_isomorphism(g, seed=77)
        h = apply_isomorphism(g, iso)
        rg = run_bp(g, BpConfig(alpha=0.5, tol=1e-8, max_iters=300))
        rh = run_bp(h, BpConfig(alpha=0.5, tol=1e-8, max_iters=300))
        bg = compute_beliefs(g, rg.messages)
        bh = compute_beliefs(h, rh.messages)
        for var in range(g.n_vars):
            np.testing.assert_allclose(bg.variable_belief(var),
                                       bh.variable_belief(iso.var_perm[var]),
                                       atol=1e-9)


class TestTrajectoryHead:
    def run_trajectory(self, g, k=3):
        layer = BpnnLayer("damping", operator=DampingOperator.scalar(0.5),
                          var_alpha=0.5)
        state = init_messages(g)
        trajectory = []
        for _ in range(k):
            state, _ = layer.step(g, state)
            trajectory.append(compute_beliefs(g, state))
        return trajectory, state

    def test_exact_bethe_readout(self):
        for seed in range(6):
            g = random_factor_graph(5, 6, 3, seed=seed, cards=(2,))
            trajectory, state = self.run_trajectory(g)
            head = TrajectoryHead.bethe_exact(3, c_max=2, a_max=3)
            estimate = head.estimate(g, trajectory, None)
            np.testing.assert_allclose(float(estimate.value), bethe_ln_z(g, state),
                                       atol=1e-9)

    def test_exact_bethe_readout_mixed_cardinalities(self):
        g = random_factor_graph(5, 6, 2, seed=3, cards=(2, 3))
        trajectory, state = self.run_trajectory(g)
        head = TrajectoryHead.bethe_exact(3, c_max=3, a_max=2)
        estimate = head.estimate(g, trajectory, None)
        np.testing.assert_allclose(float(estimate.value), bethe_ln_z(g, state),
                                   atol=1e-9)

    def test_invariant_head_agrees_across_isomorphism(self):
        rng = np.random.default_rng(11)
        head = TrajectoryHead.random(2, rng, c_max=2, a_max=3)
        for seed in range(5):
            g = random_factor_graph(4, 5, 3, seed=seed, cards=(2,))
            iso = random_isomorphism(g, seed=seed + 60)
            h = apply_isomorphism(g, iso)
            tg, _ = self.run_trajectory(g, k=2)
            th, _ = self.run_trajectory(h, k=2)
            a = float(head.estimate(g, tg, None).value)
            b = float(head.estimate(h, th, None).value)
            assert abs(a - b) <= 1e-8

    def test_non_invariant_head_detects_scope_order(self):
        # asymmetric pairwise factor, scopes swapped between the two graphs
        table = np.array([[5.0, 1.0], [2.0, 3.0]])
        g = build_factor_graph([2, 2], [FactorDecl(0, (0, 1), table)])
        swapped = build_factor_graph([2, 2], [FactorDecl(0, (1, 0), table.T)])
        rng = np.random.default_rng(12)
        invariant = TrajectoryHead.random(2, rng, c_max=2, a_max=2, invariant=True)
        rng2 = np.random.default_rng(12)
        plain = TrajectoryHead.random(2, rng2, c_max=2, a_max=2, invariant=False)
        tg, _ = self.run_trajectory(g, k=2)
        ts, _ = self.run_trajectory(swapped, k=2)
        inv_a = float(invariant.estimate(g, tg, None).value)
        inv_b = float(invariant.estimate(swapped, ts, None).value)
        np.testing.assert_allclose(inv_a, inv_b, atol=1e-8)
        ni_a = float(plain.estimate(g, tg, None).value)
        ni_b = float(plain.estimate(swapped, ts, None).value)
        assert abs(ni_a - ni_b) > 1e-6

    def test_capacity_validation(self):
        g = random_factor_graph(4, 4, 3, seed=0, cards=(2, 3))
        trajectory, _ = self.run_trajectory(g, k=2)
        small = TrajectoryHead.bethe_exact(2, c_max=2, a_max=3)
        with pytest.raises(FactorGraphError, match="cardinalities"):
            small.estimate(g, trajectory, None)
        head = TrajectoryHead.bethe_exact(3, c_max=3, a_max=3)
        with pytest.raises(ValueError, match="trajectory"):
            head.estimate(g, trajectory, None)
        g_wide = random_factor_graph(5, 3, 4, seed=1, cards=(2,))
        if max(f.arity for f in g_wide.factors) > 3:
            t2, _ = self.run_trajectory(g_wide, k=2)
            narrow = TrajectoryHead.bethe_exact(2, c_max=2, a_max=3)
            with pytest.raises(FactorGraphError, match="arities"):
                narrow.estimate(g_wide, t2, None)


class TestFullModel:
    def test_identity_init_equals_damped_bp(self):
        for k in (1, 5):
            model = build_bpnn("damping", k, card=2, max_arity=3, head="trajectory",
                               seed=0)
            for seed in range(4):
                g = random_factor_graph(5, 6, 3, seed=seed, cards=(2,))
                state = init_messages(g)
                for _ in range(k):
                    state, _ = prop.bp_iteration(g, state, var_alpha=0.5,
                                                 fac_damp=prop.scalar_damping(0.5))
                np.testing.assert_allclose(model.estimate_ln_z(g),
                                           bethe_ln_z(g, state), atol=1e-6)

    def test_message_kind_identity_init(self):
        model = build_bpnn("message", 3, card=2, max_arity=3, head="bethe", seed=0)
        for seed in range(3):
            g = random_factor_graph(5, 6, 3, seed=seed, cards=(2,))
            state = init_messages(g)
            for _ in range(3):
                state, _ = prop.bp_iteration(g, state, var_alpha=0.5,
                                             fac_damp=prop.scalar_damping(0.5))
            np.testing.assert_allclose(model.estimate_ln_z(g), bethe_ln_z(g, state),
                                       atol=1e-6)

    def test_initialized_gradient_is_finite(self):
        model = build_bpnn("damping", 2, card=2, max_arity=3, head="trajectory",
                           seed=1)
        g = random_factor_graph(5, 6, 3, seed=2, cards=(2,))
        tape = Tape()
        estimate, _, _ = model.forward(g, tape)
        backward(estimate)
        for param in model.parameters():
            assert np.all(np.isfinite(tape.lift(param).grad)), param.name

    def test_weight_tied_model_shares_parameters(self):
        model = build_bpnn("damping", 4, card=2, max_arity=3, head="bethe",
                           weight_tied=True, seed=3)
        assert len(model.layers) == 1
        assert len(model.iteration_layers()) == 4
        assert len(model.iteration_layers(7)) == 7

    def test_untied_head_must_match_layer_count(self):
        layers = [BpnnLayer("damping", operator=DampingOperator.scalar(0.5))
                  for _ in range(2)]
        with pytest.raises(ValueError, match="trajectory"):
            BpnnModel(layers, head=TrajectoryHead.bethe_exact(3))


class TestCheckpoints:
    def test_round_trip_is_value_exact(self, tmp_path):
        for kind, head in [("damping", "trajectory"), ("message", "bethe")]:
            model = build_bpnn(kind, 2, card=2, max_arity=3, head=head, seed=5)
            # perturb away from init so the blob is non-trivial
            rng = np.random.default_rng(6)
            for param in model.parameters():
                param.value += 0.01 * rng.standard_normal(param.value.shape)
            path = tmp_path / f"{kind}.ck.json"
            save_checkpoint(model, path)
            loaded = load_checkpoint(path)
            originals = model.parameters()
            restored = loaded.parameters()
            assert len(originals) == len(restored)
            for mine, theirs in zip(originals, restored):
                assert mine.name == theirs.name
                assert np.array_equal(mine.value, theirs.value)
            g = random_factor_graph(4, 5, 3, seed=7, cards=(2,))
            assert model.estimate_ln_z(g) == loaded.estimate_ln_z(g)

    def test_weight_tied_round_trip(self, tmp_path):
        model = build_bpnn("damping", 3, card=2, max_arity=3, head="bethe",
                           weight_tied=True, seed=8)
        path = tmp_path / "tied.ck.json"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.weight_tied and loaded.unroll == 3

    def test_corrupt_blob_rejected(self, tmp_path):
        model = build_bpnn("damping", 1, card=2, max_arity=3, head="bethe", seed=9)
        path = tmp_path / "ck.json"
        save_checkpoint(model, path)
        blob = path.with_name(path.name + ".bin")
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(FactorGraphError, match="blob"):
            load_checkpoint(path)
