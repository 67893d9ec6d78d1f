"""Alignment losses (closed-form and finite-difference oracles), pair
construction constraints, and curriculum mechanics."""

import numpy as np
import pytest

from masksep.align import (
    GapEntry,
    HeadSet,
    StageConfig,
    build_pairs,
    discrimination_gap,
    info_nce_symmetric,
    load_heads,
    run_curriculum,
    save_heads,
    stage2_loss,
    stage3_loss,
    triplet_cosine,
)
from masksep.embed import EmbeddingStore, OracleEmbedder, Temperature


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def tau(value=1.0):
    return Temperature(log_tau=float(np.log(value)))


class TestInfoNce:
    def test_closed_form_two_orthonormal_pairs(self):
        # za = zt = {e1, e2}, tau = 1: every row softmax puts e/(e+1) on the
        # diagonal, so the loss is -ln(e/(e+1)) = ln(1 + 1/e)
        za = np.eye(2)
        res = info_nce_symmetric(za, za.copy(), tau())
        assert res.loss == pytest.approx(0.31326168751822286, abs=1e-12)

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(0)
        za = unit_rows(rng, 6, 8)
        zt = unit_rows(rng, 6, 8)
        base = info_nce_symmetric(za, zt, tau(0.5)).loss
        perm = rng.permutation(6)
        permuted = info_nce_symmetric(za[perm], zt[perm], tau(0.5)).loss
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_loss_positive_on_finite_batches(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            za = unit_rows(rng, 4, 8)
            zt = unit_rows(rng, 4, 8)
            assert info_nce_symmetric(za, zt, tau(0.3)).loss > 0.0

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            info_nce_symmetric(np.ones((1, 4)), np.ones((1, 4)), tau())

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        za = unit_rows(rng, 4, 6)
        zt = unit_rows(rng, 4, 6)
        t = tau(0.7)
        res = info_nce_symmetric(za, zt, t)
        h = 1e-6

        for arr, grad in ((za, res.d_a), (zt, res.d_b)):
            for idx in [(0, 0), (1, 3), (3, 5)]:
                arr[idx] += h
                up = info_nce_symmetric(za, zt, t).loss
                arr[idx] -= 2 * h
                down = info_nce_symmetric(za, zt, t).loss
                arr[idx] += h
                fd = (up - down) / (2 * h)
                assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)

        up = info_nce_symmetric(za, zt, Temperature(t.log_tau + h)).loss
        down = info_nce_symmetric(za, zt, Temperature(t.log_tau - h)).loss
        fd = (up - down) / (2 * h)
        assert res.d_log_tau == pytest.approx(fd, rel=1e-4)


class TestTriplet:
    def test_zero_when_positive_dominates(self):
        z1 = np.array([[1.0, 0.0]])
        zn = np.array([[0.0, 1.0]])
        res = triplet_cosine(z1, z1.copy(), zn, margin=0.2)
        # cos(a,p)=1, cos(a,n)=0: hinge = max(0, 0 - 1 + 0.2) = 0
        assert res.loss == 0.0
        assert np.all(res.d_anchor == 0.0)

    def test_worst_case_value(self):
        # positive orthogonal, negative identical: max(0, 1 - 0 + 0.2) = 1.2
        z1 = np.array([[1.0, 0.0]])
        z2 = np.array([[0.0, 1.0]])
        res = triplet_cosine(z1, z2, z1.copy(), margin=0.2)
        assert res.loss == pytest.approx(1.2)

    def test_inactive_exactly_when_margin_satisfied(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            z1 = unit_rows(rng, 1, 4)
            z2 = unit_rows(rng, 1, 4)
            zn = unit_rows(rng, 1, 4)
            m = 0.2
            res = triplet_cosine(z1, z2, zn, m)
            cos_p = float(z1[0] @ z2[0])
            cos_n = float(z1[0] @ zn[0])
            if cos_p >= cos_n + m:
                assert res.loss == 0.0
            else:
                assert res.loss > 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        z1 = unit_rows(rng, 5, 6)
        z2 = unit_rows(rng, 5, 6)
        zn = unit_rows(rng, 5, 6)
        res = triplet_cosine(z1, z2, zn, margin=0.4)
        h = 1e-6
        for arr, grad in ((z1, res.d_anchor), (z2, res.d_pos), (zn, res.d_neg)):
            for idx in [(0, 0), (2, 3), (4, 5)]:
                arr[idx] += h
                up = triplet_cosine(z1, z2, zn, 0.4).loss
                arr[idx] -= 2 * h
                down = triplet_cosine(z1, z2, zn, 0.4).loss
                arr[idx] += h
                fd = (up - down) / (2 * h)
                assert grad[idx] == pytest.approx(fd, rel=1e-3, abs=1e-9)


class TestStage2Loss:
    def cfg(self, **kw):
        return StageConfig(stage=2, **kw)

    def test_identical_pair_orthogonal_negative(self):
        rng = np.random.default_rng(5)
        z1 = np.eye(4)[:2]
        zn = np.eye(4)[2:4]
        res = stage2_loss(z1, z1.copy(), zn, tau(), self.cfg())
        # triplet and consistency terms vanish; only InfoNCE remains
        nce = info_nce_symmetric(z1, z1.copy(), tau()).loss
        assert res.loss == pytest.approx(nce, abs=1e-12)

    def test_pure_consistency_configuration(self):
        cfg = self.cfg(lambda1=0.0, lambda2=0.0, lambda3=1.0)
        z1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        c = np.sqrt(0.5)
        z2 = np.array([[c, c], [c, c]])  # cos = c with each z1 row
        zn = unit_rows(np.random.default_rng(6), 2, 2)
        res = stage2_loss(z1, z2, zn, tau(), cfg)
        # ||z1 - z2||^2 = 2 - 2 cos = 2 - sqrt(2), averaged over rows
        assert res.loss == pytest.approx(2.0 - 2.0 * c, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        z1 = unit_rows(rng, 4, 6)
        z2 = unit_rows(rng, 4, 6)
        zn = unit_rows(rng, 4, 6)
        cfg = self.cfg()
        t = tau(0.5)
        res = stage2_loss(z1, z2, zn, t, cfg)
        h = 1e-6
        arrays = {"z1": z1, "z2": z2, "zn": zn}
        for key, arr in arrays.items():
            grad = res.d_inputs[key]
            for idx in [(0, 0), (1, 2), (3, 5)]:
                arr[idx] += h
                up = stage2_loss(z1, z2, zn, t, cfg).loss
                arr[idx] -= 2 * h
                down = stage2_loss(z1, z2, zn, t, cfg).loss
                arr[idx] += h
                fd = (up - down) / (2 * h)
                assert grad[idx] == pytest.approx(fd, rel=1e-3, abs=1e-8), key


class TestStage3Loss:
    def cfg(self, **kw):
        return StageConfig(stage=3, **kw)

    def batch(self, seed, n=4, d=6):
        rng = np.random.default_rng(seed)
        return (unit_rows(rng, n, d), unit_rows(rng, n, d), unit_rows(rng, n, d))

    def test_reduces_to_infonce(self):
        za, zv, _ = self.batch(8)
        cfg = self.cfg(mu1=1.0, mu2=0.0, mu3=0.0, mu4=0.0)
        res = stage3_loss(za, zv, zv, tau(), cfg)
        assert res.loss == pytest.approx(
            info_nce_symmetric(za, zv, tau()).loss, abs=1e-12
        )

    def test_no_replay_needed_when_coefficients_zero(self):
        za, zv_pos, zv_neg = self.batch(9)
        cfg = self.cfg(mu3=0.0, mu4=0.0)
        res = stage3_loss(za, zv_pos, zv_neg, tau(), cfg)
        assert np.isfinite(res.loss)

    def test_missing_replay_rejected(self):
        za, zv_pos, zv_neg = self.batch(10)
        with pytest.raises(ValueError, match="replay"):
            stage3_loss(za, zv_pos, zv_neg, tau(), self.cfg(mu3=0.5, mu4=0.0))
        with pytest.raises(ValueError, match="replay"):
            stage3_loss(za, zv_pos, zv_neg, tau(), self.cfg(mu3=0.0, mu4=0.5))

    def test_full_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        za, zv_pos, zv_neg = self.batch(12)
        replay_s1 = (unit_rows(rng, 3, 6), unit_rows(rng, 3, 6))
        replay_s2 = (unit_rows(rng, 3, 6), unit_rows(rng, 3, 6),
                     unit_rows(rng, 3, 6))
        cfg = self.cfg()
        t = tau(0.6)

        def full_loss():
            return stage3_loss(za, zv_pos, zv_neg, t, cfg,
                               replay_s1=replay_s1, replay_s2=replay_s2).loss

        res = stage3_loss(za, zv_pos, zv_neg, t, cfg,
                          replay_s1=replay_s1, replay_s2=replay_s2)
        h = 1e-6
        arrays = {
            "za": za, "zv_pos": zv_pos, "zv_neg": zv_neg,
            "replay_audio": replay_s1[0], "replay_text": replay_s1[1],
            "replay_z1": replay_s2[0], "replay_z2": replay_s2[1],
            "replay_zn": replay_s2[2],
        }
        worst = 0.0
        for key, arr in arrays.items():
            grad = res.d_inputs[key]
            for idx in [(0, 0), (1, 3), (2, 5)]:
                arr[idx] += h
                up = full_loss()
                arr[idx] -= 2 * h
                down = full_loss()
                arr[idx] += h
                fd = (up - down) / (2 * h)
                denom = max(abs(fd), 1e-6)
                worst = max(worst, abs(grad[idx] - fd) / denom)
        assert worst <= 1e-3

        up = stage3_loss(za, zv_pos, zv_neg, Temperature(t.log_tau + h), cfg,
                         replay_s1=replay_s1, replay_s2=replay_s2).loss
        down = stage3_loss(za, zv_pos, zv_neg, Temperature(t.log_tau - h), cfg,
                           replay_s1=replay_s1, replay_s2=replay_s2).loss
        assert res.d_log_tau == pytest.approx((up - down) / (2 * h), rel=1e-3)


def toy_store(n_items=12, n_classes=3, dim=8, seed=0, modalities=("audio", "text",
                                                                  "video")):
    oracle = OracleEmbedder(num_classes=n_classes, dim=dim, seed=seed)
    store = EmbeddingStore(dim)
    for i in range(n_items):
        cls = i % n_classes
        for m in modalities:
            store.add(m, f"item_{i:03d}", f"class_{cls}",
                      oracle.embed(m, cls, instance_seed=i).astype(np.float32))
    return store


class TestBuildPairs:
    def test_stage1_pairs_share_item_and_class(self):
        store = toy_store()
        batch = build_pairs(store, 1, np.random.default_rng(0), 16)
        assert batch.negatives is None
        for (ma, ia), (mp, ip) in zip(batch.anchors, batch.positives):
            assert (ma, mp) == ("audio", "text")
            assert ia == ip

    def test_stage2_constraints(self):
        store = toy_store()
        batch = build_pairs(store, 2, np.random.default_rng(1), 32)
        for (_, ia), (_, ip), (_, i_neg) in zip(
            batch.anchors, batch.positives, batch.negatives
        ):
            assert ia != ip
            assert store.label("audio", ia) == store.label("audio", ip)
            assert store.label("audio", ia) != store.label("audio", i_neg)

    def test_stage3_negative_never_shares_item(self):
        store = toy_store()
        batch = build_pairs(store, 3, np.random.default_rng(2), 32)
        for (_, ia), (mp, ip), (mn, i_neg) in zip(
            batch.anchors, batch.positives, batch.negatives
        ):
            assert (mp, mn) == ("video", "video")
            assert ip == ia
            assert i_neg != ia  # other item = other alignment window

    def test_single_class_store_rejected_for_stage2(self):
        store = toy_store(n_items=6, n_classes=1)
        with pytest.raises(ValueError, match="classes"):
            build_pairs(store, 2, np.random.default_rng(3), 8)

    def test_seeded_determinism(self):
        store = toy_store()
        a = build_pairs(store, 2, np.random.default_rng(7), 16)
        b = build_pairs(store, 2, np.random.default_rng(7), 16)
        assert a.anchors == b.anchors and a.negatives == b.negatives


class TestCurriculum:
    def configs(self, epochs, steps=10):
        return [
            StageConfig(stage=1, epochs=epochs, steps_per_epoch=steps,
                        batch_size=8),
            StageConfig(stage=2, epochs=epochs, steps_per_epoch=steps,
                        batch_size=8),
            StageConfig(stage=3, epochs=epochs, steps_per_epoch=steps,
                        batch_size=8),
        ]

    def test_zero_epochs_leave_heads_unchanged(self):
        store = toy_store()
        state = run_curriculum(store, self.configs(epochs=0),
                               np.random.default_rng(0))
        assert np.array_equal(state.heads.audio.weight, np.eye(8))
        assert np.array_equal(state.heads.text.bias, np.zeros(8))

    def test_carry_over_is_bit_exact(self):
        store = toy_store(n_items=18)
        state = run_curriculum(store, self.configs(epochs=2),
                               np.random.default_rng(1))
        for stage in (2, 3):
            prev_best = state.stage_best[stage - 1]
            initial = state.stage_initial[stage]
            assert np.array_equal(initial.audio.weight, prev_best.audio.weight)
            assert np.array_equal(initial.text.weight, prev_best.text.weight)
            assert np.array_equal(initial.vision.weight, prev_best.vision.weight)
            assert initial.temperature.log_tau == prev_best.temperature.log_tau

    def test_stage2_does_not_touch_text_or_vision_heads(self):
        store = toy_store(n_items=18)
        state = run_curriculum(store, self.configs(epochs=2),
                               np.random.default_rng(2))
        s2_initial = state.stage_initial[2]
        s2_best = state.stage_best[2]
        assert np.array_equal(s2_initial.text.weight, s2_best.text.weight)
        assert np.array_equal(s2_initial.vision.weight, s2_best.vision.weight)
        assert not np.array_equal(s2_initial.audio.weight, s2_best.audio.weight)

    def test_determinism(self):
        store = toy_store()
        a = run_curriculum(store, self.configs(epochs=1),
                           np.random.default_rng(5))
        b = run_curriculum(store, self.configs(epochs=1),
                           np.random.default_rng(5))
        assert np.array_equal(a.heads.audio.weight, b.heads.audio.weight)
        assert a.heads.temperature.log_tau == b.heads.temperature.log_tau


class TestHeadCheckpoint:
    def test_round_trip(self, tmp_path):
        heads = HeadSet.identity(6, tau_init=0.2)
        heads.audio.weight[0, 1] = 0.5
        heads.temperature.log_tau = -1.7
        save_heads(tmp_path / "heads.json", heads)
        loaded = load_heads(tmp_path / "heads.json")
        assert np.array_equal(loaded.audio.weight, heads.audio.weight)
        assert loaded.temperature.log_tau == heads.temperature.log_tau


class TestDiscriminationGap:
    def test_identical_target_and_mixture_give_zero(self):
        from masksep.synthdata import DEFAULT_CLASSES, build_embedder
        from masksep.spectral import Waveform

        oracle, audio = build_embedder(DEFAULT_CLASSES, dim=16, seed=0)
        rng = np.random.default_rng(6)
        w = Waveform(rng.standard_normal(8192) * 0.2, 16000)
        entries = [
            GapEntry(text_vector=oracle.embed("text", 0, 1), target=w, mixture=w)
        ]
        res = discrimination_gap(entries, audio, HeadSet.identity(16))
        assert res.mean == 0.0

    def test_empty_entries_rejected(self):
        from masksep.synthdata import DEFAULT_CLASSES, build_embedder

        _, audio = build_embedder(DEFAULT_CLASSES, dim=16, seed=0)
        with pytest.raises(ValueError):
            discrimination_gap([], audio, HeadSet.identity(16))
