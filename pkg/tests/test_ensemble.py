import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segfuse import ensemble as ens
from segfuse import fixtures as fx
from segfuse.errors import ConfigError, DimensionError, FormatError


def cfg(**kw):
    return ens.EnsembleConfig(**kw)


class TestClassEnsemble:
    def test_geometric_fixed_point(self):
        p_d = np.array([[0.8, 0.1, 0.1]])
        p_cl = np.array([[0.8, 0.2, 0.0]])
        seen = np.array([True, True])
        for alpha in (0.0, 0.3, 1.0):
            out = ens.class_ensemble(p_d, p_cl, cfg(alpha=alpha), seen,
                                     renormalize=False)
            np.testing.assert_allclose(out[0, 0], 0.8, atol=1e-12)

    def test_alpha_zero_keeps_detector(self):
        rng = np.random.default_rng(0)
        p_d = rng.dirichlet(np.ones(4), size=3)
        p_cl = rng.dirichlet(np.ones(4), size=3)
        seen = np.array([True, True, True])
        out = ens.class_ensemble(p_d, p_cl, cfg(alpha=0.0), seen, renormalize=False)
        np.testing.assert_allclose(out[:, :3], p_d[:, :3], atol=1e-12)

    def test_hand_value_unseen(self):
        p_d = np.array([[0.64, 0.2, 0.16]])
        p_cl = np.array([[0.25, 0.5, 0.0]])
        seen = np.array([False, True])
        out = ens.class_ensemble(p_d, p_cl, cfg(beta=0.5), seen, renormalize=False)
        assert out[0, 0] == pytest.approx(0.4, abs=1e-12)

    def test_no_object_column_copied(self):
        p_d = np.array([[0.3, 0.3, 0.4]])
        p_cl = np.array([[0.5, 0.5, 0.0]])
        seen = np.array([True, False])
        out = ens.class_ensemble(p_d, p_cl, cfg(), seen, renormalize=False)
        assert out[0, 2] == 0.4

    def test_renormalization_preserves_argmax(self):
        rng = np.random.default_rng(1)
        seen = np.array([True, False, True, False])
        for _ in range(100):
            p_d = rng.dirichlet(np.ones(5), size=6)
            p_cl = np.concatenate([rng.dirichlet(np.ones(4), size=6),
                                   np.zeros((6, 1))], axis=1)
            raw = ens.class_ensemble(p_d, p_cl, cfg(), seen, renormalize=False)
            normed = ens.class_ensemble(p_d, p_cl, cfg(), seen, renormalize=True)
            np.testing.assert_array_equal(np.argmax(raw[:, :4], axis=1),
                                          np.argmax(normed[:, :4], axis=1))
            np.testing.assert_allclose(normed.sum(axis=1), 1.0, atol=1e-9)

    def test_config_range_validation(self):
        with pytest.raises(ConfigError):
            cfg(alpha=1.5)
        with pytest.raises(ConfigError):
            cfg(epsilon=-0.1)


class TestBuildSamProposals:
    def make_inputs(self):
        spec = fx.SceneSpec(seed=2, height=32, width=32, classes=4, seen_classes=3,
                            instances=3, dim=8, noise_sigma=0.0)
        return fx.generate_scene(spec)

    def test_threshold_semantics(self):
        scene = self.make_inputs()
        masks = np.stack(scene.gt.instance_masks())
        kept = ens.build_sam_proposals(masks, scene.clip[1], scene.bank, xi=0.5)
        # noiseless GT masks classify confidently, so all survive
        assert kept.count == len(masks)
        dropped = ens.build_sam_proposals(masks, scene.clip[1], scene.bank, xi=1.0)
        assert dropped.count == 0

    def test_empty_input(self):
        scene = self.make_inputs()
        out = ens.build_sam_proposals(np.zeros((0, 32, 32), dtype=bool),
                                      scene.clip[1], scene.bank, xi=0.5)
        assert out.count == 0
        r_hat = ens.semantic_aggregate(out.scores, out.masks.astype(np.float64))
        np.testing.assert_array_equal(r_hat, np.zeros((4, 32, 32)))

    def test_noiseless_gt_masks_classified_correctly(self):
        scene = self.make_inputs()
        masks = np.stack(scene.gt.instance_masks())
        kept = ens.build_sam_proposals(masks, scene.clip[1], scene.bank, xi=0.5)
        assert kept.count == len(scene.gt.segment_classes)
        np.testing.assert_array_equal(np.argmax(kept.scores, axis=1),
                                      scene.gt.segment_classes)


class TestSemanticAggregate:
    def test_single_query(self):
        probs = np.array([[1.0, 0.0]])
        masks = np.array([[[0.3, 0.7], [0.0, 1.0]]])
        r = ens.semantic_aggregate(probs, masks)
        np.testing.assert_array_equal(r[0], masks[0])
        np.testing.assert_array_equal(r[1], np.zeros((2, 2)))

    def test_two_query_hand_value(self):
        probs = np.array([[0.5], [0.25]])
        masks = np.array([[[1.0]], [[0.4]]])
        r = ens.semantic_aggregate(probs, masks)
        assert r[0, 0, 0] == pytest.approx(0.6, abs=1e-12)

    def test_zero_masks(self):
        r = ens.semantic_aggregate(np.ones((3, 2)), np.zeros((3, 4, 4)))
        np.testing.assert_array_equal(r, np.zeros((2, 4, 4)))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            probs = rng.random((5, 4))
            masks = rng.random((5, 8, 8))
            r = ens.semantic_aggregate(probs, masks)
            oracle = np.zeros((4, 8, 8))
            for i in range(5):
                for c in range(4):
                    for y in range(8):
                        for x in range(8):
                            oracle[c, y, x] += probs[i, c] * masks[i, y, x]
            np.testing.assert_array_equal(r, oracle)


class TestMaskEnsemble:
    def test_epsilon_zero_identity(self):
        rng = np.random.default_rng(4)
        r = rng.random((3, 4, 4))
        r_hat = rng.random((3, 4, 4))
        out = ens.mask_ensemble(r, r_hat, 0.0, np.array([True, False, False]))
        np.testing.assert_array_equal(out, r)

    def test_seen_identity_any_epsilon(self):
        rng = np.random.default_rng(5)
        r = rng.random((2, 4, 4))
        r_hat = rng.random((2, 4, 4))
        for eps in (0.0, 0.2, 0.7, 1.0):
            out = ens.mask_ensemble(r, r_hat, eps, np.array([True, False]))
            np.testing.assert_array_equal(out[0], r[0])

    def test_hand_value(self):
        r = np.full((1, 1, 1), 0.5)
        r_hat = np.full((1, 1, 1), 0.9)
        out = ens.mask_ensemble(r, r_hat, 0.2, np.array([False]))
        assert out[0, 0, 0] == pytest.approx(0.58, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=0, max_value=1), st.floats(min_value=0, max_value=10),
           st.floats(min_value=0, max_value=10), st.floats(min_value=0, max_value=10))
    def test_monotone_in_proposals(self, eps, r_val, low, delta):
        r = np.full((1, 1, 1), r_val)
        lo = ens.mask_ensemble(r, np.full((1, 1, 1), low), eps, np.array([False]))
        hi = ens.mask_ensemble(r, np.full((1, 1, 1), low + delta), eps,
                               np.array([False]))
        assert hi[0, 0, 0] >= lo[0, 0, 0]


class TestSemanticDecode:
    def test_one_hot(self):
        scores = np.zeros((3, 2, 2))
        scores[1] = 1.0
        np.testing.assert_array_equal(ens.semantic_decode(scores),
                                      np.full((2, 2), 1))

    def test_tie_lowest_class(self):
        scores = np.zeros((6, 1, 1))
        scores[2] = scores[5] = 0.9
        assert ens.semantic_decode(scores)[0, 0] == 2

    def test_hand_argmax(self):
        scores = np.array([
            [[0.1, 0.9], [0.4, 0.4]],
            [[0.5, 0.2], [0.4, 0.6]],
        ])
        expected = np.array([[1, 0], [0, 1]])
        np.testing.assert_array_equal(ens.semantic_decode(scores), expected)


class TestPanopticDecode:
    def test_all_no_object_gives_void(self):
        probs = np.array([[0.1, 0.2, 0.7]])  # no-object wins
        logits = np.full((1, 4, 4), 5.0)
        pan = ens.panoptic_decode(probs, logits, min_area=1)
        assert (pan.segments == -1).all()
        assert pan.classes == {}

    def test_two_disjoint_queries(self):
        probs = np.array([[0.9, 0.05, 0.05], [0.05, 0.9, 0.05]])
        logits = np.full((2, 4, 4), -9.0)
        logits[0, :, :2] = 9.0
        logits[1, :, 2:] = 9.0
        pan = ens.panoptic_decode(probs, logits, min_area=1)
        assert pan.classes[pan.segments[0, 0]] == 0
        assert pan.classes[pan.segments[0, 3]] == 1
        assert (pan.segments >= 0).all()

    def test_overlap_goes_to_higher_score(self):
        # p1*m1 = 0.9 vs p2*m2 = 0.6 on the shared pixel
        probs = np.array([[0.9, 0.0, 0.1], [0.0, 0.75, 0.25]])
        logits = np.full((2, 2, 2), -9.0)
        logits[0] = 100.0          # sigmoid -> 1.0, score 0.9
        logits[1, 0, 0] = 100.0    # overlap pixel, score 0.75 * ~0.8
        logits[1, 0, 1] = 100.0
        probs2 = probs.copy()
        pan = ens.panoptic_decode(probs2, logits, min_area=1)
        assert pan.classes[pan.segments[0, 0]] == 0

    def test_score_floor_voids_weak_pixels(self):
        probs = np.array([[0.3, 0.1, 0.6]])  # class 0 wins but conf is low
        logits = np.full((1, 4, 4), 100.0)
        pan = ens.panoptic_decode(probs, logits, min_area=1, score_floor=0.4)
        assert (pan.segments == -1).all()

    def test_min_area_drops_small_segments(self):
        probs = np.array([[0.9, 0.0, 0.1]])
        logits = np.full((1, 4, 4), -9.0)
        logits[0, 0, 0] = 9.0
        pan = ens.panoptic_decode(probs, logits, min_area=2)
        assert (pan.segments == -1).all()

    def test_segments_disjoint_and_never_no_object(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            n, c = 5, 3
            probs = rng.dirichlet(np.ones(c + 1), size=n)
            logits = rng.normal(size=(n, 8, 8)) * 3
            pan = ens.panoptic_decode(probs, logits, min_area=1)
            ids = np.unique(pan.segments)
            ids = ids[ids >= 0]
            assert set(ids) == set(pan.classes)
            assert all(cls < c for cls in pan.classes.values())


class TestProposalFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(10):
            masks = rng.random((int(rng.integers(0, 5)), 6, 9)) > 0.5
            p = tmp_path / f"m{i}.fzpm"
            ens.save_proposal_file(p, masks)
            back = ens.load_proposal_file(p)
            np.testing.assert_array_equal(back, masks)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.fzpm"
        p.write_bytes(b"ABCD" + bytes(16))
        with pytest.raises(FormatError) as exc:
            ens.load_proposal_file(p)
        assert exc.value.offset == 0

    def test_run_sum_mismatch(self, tmp_path):
        p = tmp_path / "m.fzpm"
        ens.save_proposal_file(p, np.ones((1, 2, 2), dtype=bool))
        raw = bytearray(p.read_bytes())
        raw[-4:] = (3).to_bytes(4, "little")  # corrupt final run length
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            ens.load_proposal_file(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "m.fzpm"
        ens.save_proposal_file(p, np.ones((2, 4, 4), dtype=bool))
        raw = p.read_bytes()
        p.write_bytes(raw[:-2])
        with pytest.raises(FormatError):
            ens.load_proposal_file(p)

    def test_shape_validation(self, tmp_path):
        with pytest.raises(DimensionError):
            ens.save_proposal_file(tmp_path / "x.fzpm", np.ones((2, 2), dtype=bool))
