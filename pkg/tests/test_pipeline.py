import numpy as np
import pytest

from qmop.branches import CompressedTokens, pool_local, prune_scores, \
    prune_select, resample
from qmop.linalg import ACTIVATIONS, ShapeError, seeded_fill
from qmop.pipeline import (
    BranchCounters,
    fuse,
    infer_forward,
    init_projector_params,
    params_to_vector,
    run_branches,
    set_params_from_vector,
    stage1_forward,
    train_forward,
)


def force_logits(params, logits):
    """Make the router output exactly these logits for any input."""
    params.router.w1[:] = 0.0
    params.router.b1[:] = 0.0
    params.router.w2[:] = 0.0
    params.router.b2[:] = logits
    return params


class TestRunBranches:
    def test_all_outputs_have_m_rows(self, tiny_bundle, tiny_params):
        outs = run_branches(tiny_bundle, tiny_params)
        for name in ("pool", "resample", "prune"):
            assert outs[name].tokens.shape == (4, 8)
            assert outs[name].origin == name

    def test_deterministic(self, tiny_bundle, tiny_params):
        a = run_branches(tiny_bundle, tiny_params)
        b = run_branches(tiny_bundle, tiny_params)
        for name in a:
            assert a[name].tokens.tobytes() == b[name].tokens.tobytes()

    def test_matches_module_level_operators(self, tiny_bundle, tiny_params):
        outs = run_branches(tiny_bundle, tiny_params)
        assert np.array_equal(
            outs["pool"].tokens,
            pool_local(tiny_bundle, tiny_params.pool).tokens)
        assert np.array_equal(
            outs["resample"].tokens,
            resample(tiny_bundle.patches, tiny_params.resampler).tokens)
        scores = prune_scores(tiny_bundle, tiny_params.relevance, 0.5)
        assert np.array_equal(
            outs["prune"].tokens,
            prune_select(tiny_bundle.patches, scores, 4).tokens)

    def test_counters(self, tiny_bundle, tiny_params):
        counters = BranchCounters()
        run_branches(tiny_bundle, tiny_params, counters)
        assert (counters.pool, counters.resample, counters.prune) == (1, 1, 1)


class TestFuse:
    def outputs(self, seed=0):
        return {name: CompressedTokens(seeded_fill(seed + i, 4, 8), name)
                for i, name in enumerate(("pool", "resample", "prune"))}

    def test_one_hot_bit_exact(self):
        outs = self.outputs()
        fused = fuse(outs, np.array([1.0, 0.0, 0.0]))
        assert fused.tobytes() == outs["pool"].tokens.tobytes()

    def test_equal_matrices_convexity(self):
        a = seeded_fill(0, 4, 8)
        outs = {"pool": CompressedTokens(a, "pool"),
                "resample": CompressedTokens(a.copy(), "resample"),
                "prune": None}
        assert np.allclose(fuse(outs, np.array([0.5, 0.5, 0.0])), a,
                           atol=1e-15)

    def test_matches_scalar_loop(self):
        outs = self.outputs(3)
        w = np.array([0.625, 0.375, 0.0])
        ref = np.zeros((4, 8))
        for i in range(4):
            for j in range(8):
                ref[i, j] = (0.625 * outs["pool"].tokens[i, j]
                             + 0.375 * outs["resample"].tokens[i, j])
        assert np.allclose(fuse(outs, w), ref, atol=1e-12)

    def test_linear_in_weights(self):
        outs = self.outputs(5)
        w1 = np.array([0.2, 0.3, 0.1])
        w2 = np.array([0.1, 0.05, 0.4])
        assert np.allclose(fuse(outs, w1 + w2),
                           fuse(outs, w1) + fuse(outs, w2), atol=1e-12)

    def test_convex_combination_bounds(self):
        outs = self.outputs(7)
        w = np.array([0.2, 0.5, 0.3])
        fused = fuse(outs, w)
        stack = np.stack([outs[n].tokens for n in ("pool", "resample",
                                                   "prune")])
        assert (fused >= stack.min(axis=0) - 1e-12).all()
        assert (fused <= stack.max(axis=0) + 1e-12).all()

    def test_shape_mismatch(self):
        outs = self.outputs()
        outs["prune"] = CompressedTokens(seeded_fill(9, 3, 8), "prune")
        with pytest.raises(ShapeError):
            fuse(outs, np.array([0.3, 0.3, 0.4]))

    def test_missing_branch_with_weight(self):
        outs = self.outputs()
        outs["prune"] = None
        with pytest.raises(ShapeError):
            fuse(outs, np.array([0.3, 0.3, 0.4]))


class TestStage1Forward:
    def test_output_shape(self, tiny_bundle, tiny_params):
        out = stage1_forward(tiny_bundle, tiny_params)
        assert out.tokens.shape == (4, 8)
        assert out.mode == "stage1"
        assert out.gate is None and out.active is None

    def test_zeroed_output_layer_gives_bias(self, tiny_bundle, tiny_params):
        tiny_params.stage1_mlp.w_out[:] = 0.0
        tiny_params.stage1_mlp.b_out[:] = 2.5
        out = stage1_forward(tiny_bundle, tiny_params)
        assert np.allclose(out.tokens, 2.5, atol=1e-15)

    def test_matches_composed_reference(self, tiny_bundle, tiny_params):
        outs = run_branches(tiny_bundle, tiny_params)
        concat = np.concatenate(
            [outs[n].tokens for n in ("pool", "resample", "prune")], axis=1)
        act, _ = ACTIVATIONS["gelu"]
        mlp = tiny_params.stage1_mlp
        ref = act(concat @ mlp.w_in.T + mlp.b_in) @ mlp.w_out.T + mlp.b_out
        out = stage1_forward(tiny_bundle, tiny_params)
        assert np.allclose(out.tokens, ref, atol=1e-12)


class TestTrainForward:
    def test_zero_logits_fuse_to_mean(self, tiny_bundle, tiny_params):
        force_logits(tiny_params, [0.0, 0.0, 0.0])
        cache = {}
        train_forward(tiny_bundle, tiny_params, cache=cache)
        outs = cache["outputs"]
        mean = sum(outs[n].tokens for n in outs) / 3.0
        assert np.allclose(cache["fused"], mean, atol=1e-12)

    def test_deterministic_without_noise(self, tiny_bundle, tiny_params):
        a = train_forward(tiny_bundle, tiny_params, seed=1)
        b = train_forward(tiny_bundle, tiny_params, seed=2)
        assert a.tokens.tobytes() == b.tokens.tobytes()

    def test_sharp_gate_approaches_single_branch(self, tiny_bundle,
                                                 tiny_params):
        force_logits(tiny_params, [2.0, 1.0, 0.0])  # pool wins
        sharp = train_forward(tiny_bundle, tiny_params, tau=0.01)
        single = infer_forward(tiny_bundle, tiny_params, ("topk", 1))
        assert single.active.members == ("pool",)
        rel = np.linalg.norm(sharp.tokens - single.tokens) \
            / np.linalg.norm(single.tokens)
        assert rel <= 1e-2


class TestInferForward:
    def test_topk3_equals_train(self, tiny_bundle, tiny_params):
        inf = infer_forward(tiny_bundle, tiny_params, ("topk", 3))
        trn = train_forward(tiny_bundle, tiny_params, tau=1.0)
        assert np.max(np.abs(inf.tokens - trn.tokens)) <= 1e-12

    def test_topk1_is_single_branch_through_mlp(self, tiny_bundle,
                                                tiny_params):
        from qmop.pipeline import _mlp_forward
        out = infer_forward(tiny_bundle, tiny_params, ("topk", 1))
        (branch,) = out.active.members
        branch_out = run_branches(tiny_bundle, tiny_params)[branch]
        expected = _mlp_forward(tiny_params.out_mlp, branch_out.tokens)
        assert np.array_equal(out.tokens, expected)

    def test_engineered_renormalization(self, tiny_bundle, tiny_params):
        force_logits(tiny_params, np.log([0.5, 0.3, 0.2]))
        out = infer_forward(tiny_bundle, tiny_params, ("topk", 2))
        assert out.active.members == ("pool", "resample")
        assert np.allclose(out.active.renorm_weights, [0.625, 0.375],
                           atol=1e-9)

    def test_skipped_branch_never_invoked(self, tiny_bundle, tiny_params):
        force_logits(tiny_params, np.log([0.5, 0.3, 0.2]))
        counters = BranchCounters()
        infer_forward(tiny_bundle, tiny_params, ("topk", 2), counters)
        assert counters.prune == 0
        assert counters.pool == 1 and counters.resample == 1

    def test_threshold_mode(self, tiny_bundle, tiny_params):
        force_logits(tiny_params, np.log([0.5, 0.3, 0.2]))
        out = infer_forward(tiny_bundle, tiny_params, ("threshold", 0.25))
        assert out.active.members == ("pool", "resample")

    def test_every_mode_yields_m_by_dllm(self, tiny_bundle, tiny_params):
        for mode in (("topk", 1), ("topk", 2), ("topk", 3),
                     ("threshold", 0.2)):
            assert infer_forward(tiny_bundle, tiny_params,
                                 mode).tokens.shape == (4, 8)


class TestParamsVector:
    def test_round_trip(self, tiny_params):
        vec, layout = params_to_vector(tiny_params)
        vec2 = vec.copy()
        vec2 += 1.0
        set_params_from_vector(tiny_params, vec2)
        vec3, _ = params_to_vector(tiny_params)
        assert np.array_equal(vec3, vec2)

    def test_layout_covers_vector(self, tiny_params):
        vec, layout = params_to_vector(tiny_params)
        total = sum(sl.stop - sl.start for sl, _ in layout.values())
        assert total == vec.size


def test_init_rejects_inconsistent_geometry():
    with pytest.raises(ShapeError):
        init_projector_params(4, 4, 8, 6, 8, m_tokens=5, stride=2)
    with pytest.raises(ShapeError):
        init_projector_params(5, 4, 8, 6, 8, m_tokens=4, stride=2)
