import numpy as np
import pytest

from atso.data import GeneratorSpec, Image, LabelMap, Sample, gen_synthetic_task
from atso.learners import (ArchSpec, Hyper, InitPolicy, Model, Provenance,
                           TrainItem, TrainSet, ViewSpec, extract_features,
                           fuse_majority, head_scores, load_model,
                           mean_cross_entropy, predict, predict_multiview,
                           save_model, train)
from atso.metrics import ClassMapping


def tiny_bundle(seed=7, **kw):
    base = dict(height=16, width=16, n_labeled=3, n_reference=4, n_test=2,
                min_class_frac=0.08, max_class_frac=0.3, blobs_per_class=1)
    base.update(kw)
    return gen_synthetic_task(GeneratorSpec(**base), seed)


def gt_items(bundle):
    return [TrainItem(s, s.label, "ground_truth") for s in bundle.labeled]


ARCH = ArchSpec(channels=1, num_classes=2, hidden_units=8, feature_radii=(1, 3))
HYPER = Hyper(epochs=8, lr=0.5, batch_size=512)


class TestFeatures:
    def test_shape(self):
        b = tiny_bundle()
        feats = extract_features(b.labeled[0].image, (1, 3))
        assert feats.shape == (16 * 16, 1 * (1 + 2 * 2))

    def test_first_column_is_raw(self):
        b = tiny_bundle()
        img = b.labeled[0].image
        feats = extract_features(img, (1, 3))
        assert (feats[:, 0] == img.data[:, :, 0].ravel()).all()


class TestTrain:
    def test_deterministic_weights(self):
        b = tiny_bundle()
        m1 = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        m2 = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        for p1, p2 in zip(m1.params, m2.params):
            assert (p1 == p2).all()
        assert m1.model_id == m2.model_id

    def test_zero_epoch_continuation_keeps_weights(self):
        b = tiny_bundle()
        teacher = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        student = train(ARCH, TrainSet(gt_items(b)), InitPolicy.continued(teacher),
                        Hyper(epochs=0, lr=0.5, batch_size=512), 43)
        for p1, p2 in zip(teacher.params, student.params):
            assert (p1 == p2).all()
        assert "continued_from" in student.provenance.init_policy

    def test_empty_train_set(self):
        with pytest.raises(ValueError, match="empty"):
            train(ARCH, TrainSet([]), InitPolicy.fresh(), HYPER, 0)

    def test_arch_mismatch_on_continuation(self):
        b = tiny_bundle()
        teacher = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        other = ArchSpec(channels=1, num_classes=2, hidden_units=4, feature_radii=(1, 3))
        with pytest.raises(ValueError, match="arch"):
            train(other, TrainSet(gt_items(b)), InitPolicy.continued(teacher), HYPER, 0)

    def test_fingerprint_covers_exact_ids(self):
        b = tiny_bundle()
        m = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        assert sorted(m.provenance.dataset_ids) == sorted(s.id for s in b.labeled)
        assert set(m.provenance.dataset_tags) == {"ground_truth"}

    def test_separable_task_fits(self):
        """Linearly separable per-pixel features must be fit to >= 99%
        training accuracy; separability is certified by an independent
        convex solver on the same rows."""
        rng = np.random.default_rng(0)
        h = w = 16
        labels = (rng.random((h, w)) < 0.4).astype(np.int32)
        img = np.where(labels == 1, 1.0, -1.0)[..., None] + 0.0
        sample = Sample("sep", Image(img), LabelMap(labels, 2))
        arch = ArchSpec(1, 2, 0, (1,))
        feats = extract_features(sample.image, (1,))

        from sklearn.linear_model import LogisticRegression
        oracle = LogisticRegression(C=1e6, max_iter=2000).fit(feats, labels.ravel())
        assert oracle.score(feats, labels.ravel()) >= 0.99

        m = train(arch, TrainSet([TrainItem(sample, sample.label, "ground_truth")]),
                  InitPolicy.fresh(), Hyper(epochs=60, lr=2.0, batch_size=256), 1)
        pred, _ = predict(m, sample.image)
        assert (pred.data == labels).mean() >= 0.99

    def test_full_batch_loss_monotone(self):
        b = tiny_bundle()
        n_rows = sum(s.label.data.size for s in b.labeled)
        hyper = Hyper(epochs=25, lr=0.05, batch_size=n_rows, l2=0.0)
        m = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), hyper, 3)
        losses = np.array(m.loss_history)
        assert (np.diff(losses) <= 1e-12).all()

    def test_partial_init_keeps_hidden_layer(self):
        b = tiny_bundle()
        base = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        student = train(ARCH, TrainSet(gt_items(b)), InitPolicy.partial(base),
                        Hyper(epochs=0, lr=0.5, batch_size=512), 99)
        assert (student.params[0] == base.params[0]).all()
        assert (student.params[1] == base.params[1]).all()
        assert not (student.params[2] == base.params[2]).all()


class TestGradients:
    def _numeric_check(self, arch, mapping, seed):
        """Central finite differences against the gradient recovered from a
        full-batch step with lr=1, l2=0."""
        from atso import _kernels

        rng = np.random.default_rng(seed)
        n, f = 12, arch.n_features
        k = arch.num_classes
        X = np.ascontiguousarray(rng.normal(size=(n, f)))
        if mapping is None:
            y = rng.integers(0, k, size=n).astype(np.int32)
            red = np.zeros(n, dtype=np.uint8)
            group = np.arange(k, dtype=np.int32)
        else:
            y = rng.integers(0, mapping.target_classes, size=n).astype(np.int32)
            red = np.ones(n, dtype=np.uint8)
            group = mapping.as_array()
        perm = np.arange(n, dtype=np.int64)

        def init_params():
            if arch.hidden_units == 0:
                return [rng0.normal(scale=0.5, size=(f, k)), np.zeros(k)]
            return [rng0.normal(scale=0.5, size=(f, arch.hidden_units)),
                    np.zeros(arch.hidden_units),
                    rng0.normal(scale=0.5, size=(arch.hidden_units, k)),
                    np.zeros(k)]

        def loss_at(params):
            if arch.hidden_units == 0:
                P = _kernels.forward_linear(X, *params)
            else:
                P = _kernels.forward_mlp(X, *params)
            member = np.zeros((n, k))
            for i in range(n):
                if red[i]:
                    member[i] = group == y[i]
                else:
                    member[i, y[i]] = 1.0
            return float(-np.log((P * member).sum(axis=1)).mean())

        rng0 = np.random.default_rng(seed + 1)
        params = [np.ascontiguousarray(p) for p in init_params()]
        stepped = [p.copy() for p in params]
        if arch.hidden_units == 0:
            _kernels.sgd_epoch_linear(X, y, red, group, *stepped, perm, n, 1.0, 0.0)
        else:
            _kernels.sgd_epoch_mlp(X, y, red, group, *stepped, perm, n, 1.0, 0.0)
        analytic = [p - s for p, s in zip(params, stepped)]

        h = 1e-6
        worst = 0.0
        for bi, block in enumerate(params):
            it = np.nditer(block, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = block[idx]
                block[idx] = orig + h
                up = loss_at(params)
                block[idx] = orig - h
                dn = loss_at(params)
                block[idx] = orig
                num = (up - dn) / (2 * h)
                ana = analytic[bi][idx]
                rel = abs(num - ana) / max(1e-8, abs(num) + abs(ana))
                worst = max(worst, rel)
        return worst

    def test_mlp_gradients(self):
        arch = ArchSpec(1, 3, 5, (1,))
        assert self._numeric_check(arch, None, 0) <= 1e-5

    def test_linear_gradients(self):
        arch = ArchSpec(1, 4, 0, (1,))
        assert self._numeric_check(arch, None, 1) <= 1e-5

    def test_reduced_loss_gradients(self):
        arch = ArchSpec(1, 4, 5, (1,))
        mapping = ClassMapping(4, 2, (0, 1, 1, 0))
        assert self._numeric_check(arch, mapping, 2) <= 1e-5


class TestReducedLossEquivalence:
    def test_group_mass_equals_reduced_prediction_score(self):
        """Summing class scores within each target group must equal the
        plain score of the reduced prediction, within 1e-9."""
        b = tiny_bundle(num_classes=4, min_class_frac=0.05, max_class_frac=0.15)
        arch = ArchSpec(1, 4, 6, (1, 3))
        m = train(arch, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 11)
        mapping = ClassMapping(4, 2, (0, 1, 1, 0))
        img = b.labeled[0].image
        feats = extract_features(img, arch.feature_radii)
        P = head_scores(m, feats)
        reduced_truth = np.asarray(
            [mapping.table[c] for c in b.labeled[0].label.data.ravel()],
            dtype=np.int32)
        loss_grouped = mean_cross_entropy(
            m, feats, reduced_truth, np.ones(len(reduced_truth), np.uint8), mapping)
        group_mass = np.zeros((P.shape[0], 2))
        for src, tgt in enumerate(mapping.table):
            group_mass[:, tgt] += P[:, src]
        direct = float(-np.log(group_mass[np.arange(len(reduced_truth)),
                                          reduced_truth]).mean())
        assert loss_grouped == pytest.approx(direct, abs=1e-9)


class TestPredict:
    def test_output_shapes_and_normalization(self):
        b = tiny_bundle()
        m = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        label, scores = predict(m, b.test[0].image)
        assert label.data.shape == (16, 16)
        assert scores.shape == (16, 16, 2)
        np.testing.assert_allclose(scores.sum(axis=2), 1.0, atol=1e-9)

    def test_forced_constant_head(self):
        arch = ArchSpec(1, 3, 0, (1,))
        W = np.zeros((arch.n_features, 3))
        b = np.array([10.0, 0.0, 0.0])
        prov = Provenance(0, "fresh", (), (), "x", 0)
        m = Model(arch, (W, b), prov, "forced")
        img = Image(np.random.default_rng(0).normal(size=(5, 5, 1)))
        label, _ = predict(m, img)
        assert (label.data == 0).all()

    def test_deterministic(self):
        b = tiny_bundle()
        m = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        l1, s1 = predict(m, b.test[0].image)
        l2, s2 = predict(m, b.test[0].image)
        assert (l1.data == l2.data).all()
        assert (s1 == s2).all()

    def test_channel_mismatch(self):
        b = tiny_bundle()
        m = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        img = Image(np.zeros((4, 4, 2)))
        with pytest.raises(ValueError, match="channels"):
            predict(m, img)


class TestFusion:
    def test_identical_maps(self):
        m = LabelMap(np.array([[1, 0], [2, 1]]), 3)
        assert (fuse_majority([m, m, m]).data == m.data).all()

    def test_strict_majority(self):
        a = LabelMap(np.array([[1]]), 3)
        b = LabelMap(np.array([[1]]), 3)
        c = LabelMap(np.array([[2]]), 3)
        assert fuse_majority([a, b, c]).data[0, 0] == 1

    def test_tie_breaks_to_lowest(self):
        a = LabelMap(np.array([[2]]), 3)
        b = LabelMap(np.array([[1]]), 3)
        assert fuse_majority([a, b]).data[0, 0] == 1

    def test_dim_mismatch(self):
        a = LabelMap(np.zeros((2, 2)), 2)
        b = LabelMap(np.zeros((3, 3)), 2)
        with pytest.raises(ValueError, match="dims"):
            fuse_majority([a, b])


class TestViews:
    def test_involution(self):
        rng = np.random.default_rng(0)
        img = Image(rng.normal(size=(6, 4, 1)))
        lab = LabelMap(rng.integers(0, 3, size=(6, 4)), 3)
        for name in ("identity", "transpose", "flip_h", "flip_v", "rot180"):
            v = ViewSpec(name, name)
            timg = v.apply(img)
            back = v.invert(LabelMap(timg.data[:, :, 0].astype(np.int32) * 0, 3))
            assert back.data.shape == lab.data.shape
            twice = v.invert(v.invert(lab))
            assert (twice.data == lab.data).all()

    def test_single_view_equals_plain_predict(self):
        b = tiny_bundle()
        m = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        v = ViewSpec("axial", "identity")
        fused = predict_multiview({"axial": m}, [v], b.test[0].image)
        plain, _ = predict(m, b.test[0].image)
        assert (fused.data == plain.data).all()

    def test_three_views_recompute_from_saved_masks(self):
        """Fusion must equal an independent per-pixel vote recount over the
        inverted per-view predictions."""
        b = tiny_bundle()
        views = [ViewSpec("a", "identity"), ViewSpec("b", "transpose"),
                 ViewSpec("c", "flip_h")]
        models = {}
        for i, v in enumerate(views):
            models[v.view_id] = train(ARCH, TrainSet(gt_items(b)),
                                      InitPolicy.fresh(), HYPER, 50 + i)
        img = b.test[0].image
        fused = predict_multiview(models, views, img)
        per_view = []
        for v in views:
            lab, _ = predict(models[v.view_id], v.apply(img))
            per_view.append(v.invert(lab).data)
        h, w = per_view[0].shape
        recount = np.zeros((h, w), dtype=np.int32)
        for i in range(h):
            for j in range(w):
                votes = [int(p[i, j]) for p in per_view]
                counts = [votes.count(c) for c in range(2)]
                recount[i, j] = int(np.argmax(counts))
        assert (fused.data == recount).all()

    def test_missing_view_model(self):
        b = tiny_bundle()
        m = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        with pytest.raises(KeyError, match="sagittal"):
            predict_multiview({"axial": m}, [ViewSpec("sagittal", "transpose")],
                              b.test[0].image)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        b = tiny_bundle()
        m = train(ARCH, TrainSet(gt_items(b)), InitPolicy.fresh(), HYPER, 42)
        path = tmp_path / "model.mdl"
        save_model(m, path)
        back = load_model(path)
        assert back.model_id == m.model_id
        assert back.arch == m.arch
        assert back.provenance == m.provenance
        for p1, p2 in zip(m.params, back.params):
            assert (p1 == p2).all()
