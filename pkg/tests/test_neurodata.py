import numpy as np
import pytest

from musedec import neurodata, stimfeat
from musedec.neurodata import (
    NeuroDataError,
    SplitSpec,
    SubjectDataset,
    gather_batch,
    make_batches,
    patchify_rois,
    pca_fit,
    pca_reduce,
    split_dataset,
    synth_generate,
    zero_pad,
)


def _features(n_s=60, seed=0, n_classes=4):
    return stimfeat.synth_features(n_s, n_classes, 8, 12, seed=seed)


def _datasets(features, n_subjects=3, n_per=40, n_patches=4, patch_dim=6, seed=0, **kw):
    return synth_generate(n_subjects, n_per, n_patches, patch_dim, features, snr=5.0, seed=seed, **kw)


class TestPca:
    def test_variance_matches_eigendecomposition(self):
        # projected variance along the top-k principal axes must equal the
        # top-k eigenvalues of the sample covariance (independent oracle)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(40, 9)) * np.array([5.0, 3.0, 2.0, 1, 1, 1, 1, 1, 1])
        k = 3
        proj = pca_fit(x, k)
        reduced = proj.apply(x)
        cov = np.cov(x, rowvar=False, bias=True)
        eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
        got = reduced.var(axis=0)
        np.testing.assert_allclose(np.sort(got)[::-1], eigvals[:k], rtol=1e-8)

    def test_reconstruction_beats_random_projection(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(50, 12)) @ rng.normal(size=(12, 12))
        proj = pca_fit(x, 4)
        centered = x - proj.mean
        recon = proj.apply(x) @ proj.components.T
        pca_err = np.linalg.norm(centered - recon)
        q, _ = np.linalg.qr(rng.normal(size=(12, 4)))
        rand_err = np.linalg.norm(centered - centered @ q @ q.T)
        assert pca_err < rand_err

    def test_rank_deficient_flag_and_padding(self):
        # rank-2 data asked for 4 components: last two must be zero columns
        rng = np.random.default_rng(1)
        basis = rng.normal(size=(2, 8))
        x = rng.normal(size=(30, 2)) @ basis
        proj = pca_fit(x, 4)
        assert proj.rank_deficient
        assert np.array_equal(proj.components[:, 2:], np.zeros((8, 2)))
        reduced = proj.apply(x)
        np.testing.assert_allclose(reduced[:, 2:], 0.0, atol=1e-10)

    def test_full_rank_not_flagged(self):
        rng = np.random.default_rng(2)
        proj = pca_fit(rng.normal(size=(20, 6)), 5)
        assert not proj.rank_deficient

    def test_target_dim_too_large(self):
        with pytest.raises(NeuroDataError):
            pca_fit(np.zeros((3, 10)), 4)

    def test_identity_when_target_equals_rank(self):
        # with target_dim == d and n > d the projection is an isometry of the
        # centered data: pairwise distances are preserved
        rng = np.random.default_rng(3)
        x = rng.normal(size=(25, 5))
        proj = pca_fit(x, 5)
        red = proj.apply(x)
        d_orig = np.linalg.norm(x[:, None] - x[None, :], axis=2)
        d_red = np.linalg.norm(red[:, None] - red[None, :], axis=2)
        np.testing.assert_allclose(d_red, d_orig, rtol=1e-9, atol=1e-9)

    def test_pca_reduce_nesting_and_train_rows_only(self):
        rng = np.random.default_rng(4)
        blocks = [[rng.normal(size=(30, 10)), rng.normal(size=(30, 7))] for _ in range(2)]
        train_rows = np.arange(20)
        reduced, projections = pca_reduce(blocks, 5, train_rows)
        assert len(reduced) == 2 and len(reduced[0]) == 2
        assert reduced[0][0].shape == (30, 5)
        # fitting must ignore non-train rows entirely
        blocks2 = [[b.copy() for b in subj] for subj in blocks]
        for subj in blocks2:
            for b in subj:
                b[20:] = 999.0
        reduced2, _ = pca_reduce(blocks2, 5, train_rows)
        np.testing.assert_allclose(reduced2[0][0][:20], reduced[0][0][:20])
        np.testing.assert_allclose(projections[0][0].mean, blocks[0][0][:20].mean(axis=0))


class TestZeroPadPatchify:
    def test_zero_pad(self):
        out = zero_pad(np.ones((3, 2)), 5)
        assert out.shape == (3, 5)
        np.testing.assert_array_equal(out[:, 2:], 0.0)
        np.testing.assert_array_equal(out[:, :2], 1.0)

    def test_zero_pad_rejects_shrink(self):
        with pytest.raises(NeuroDataError):
            zero_pad(np.ones((3, 6)), 5)

    def test_patchify_stacks_rois(self):
        rng = np.random.default_rng(0)
        blocks = [rng.normal(size=(10, 4)) for _ in range(3)]
        patches = patchify_rois(blocks)
        assert patches.shape == (10, 3, 4)
        for m, b in enumerate(blocks):
            np.testing.assert_array_equal(patches[:, m, :], b)

    def test_patchify_width_mismatch(self):
        with pytest.raises(NeuroDataError):
            patchify_rois([np.zeros((5, 4)), np.zeros((5, 3))])


class TestSplits:
    def test_same_stimuli_partition_and_alignment(self):
        features = _features(60)
        datasets, _ = _datasets(features, n_per=60)
        spec = SplitSpec("same-stimuli", counts=(40, 10, 10), seed=3)
        splits = split_dataset(datasets, spec)
        ref = None
        for ds in datasets:
            parts = splits[ds.subject_id]
            all_rows = np.concatenate([parts["train"], parts["val"], parts["test"]])
            assert len(set(all_rows.tolist())) == 60
            ids = {p: {ds.stimulus_ids[i] for i in parts[p]} for p in parts}
            if ref is None:
                ref = ids
            else:
                # every subject sees the same stimulus partition
                assert ids == ref
        assert len(ref["train"]) == 40 and len(ref["val"]) == 10 and len(ref["test"]) == 10

    def test_same_stimuli_requires_identical_sets(self):
        features = _features(80)
        datasets, _ = _datasets(features, n_per=60)
        with pytest.raises(NeuroDataError):
            split_dataset(datasets, SplitSpec("same-stimuli", counts=(40, 10, 10)))

    def test_same_stimuli_deterministic(self):
        features = _features(60)
        datasets, _ = _datasets(features, n_per=60)
        spec = SplitSpec("same-stimuli", fractions=(0.7, 0.15, 0.15), seed=9)
        a = split_dataset(datasets, spec)
        b = split_dataset(datasets, spec)
        for sid in a:
            for part in a[sid]:
                np.testing.assert_array_equal(a[sid][part], b[sid][part])

    def test_disjoint_train_val_pairwise_disjoint(self):
        features = _features(200)
        datasets, _ = _datasets(features, n_per=120, seed=2)
        spec = SplitSpec("disjoint-stimuli", counts=(30, 5, 10), seed=1)
        splits = split_dataset(datasets, spec)
        trainval = []
        test_sets = []
        for ds in datasets:
            parts = splits[ds.subject_id]
            tv = {ds.stimulus_ids[i] for i in np.concatenate([parts["train"], parts["val"]])}
            trainval.append(tv)
            test_sets.append(frozenset(ds.stimulus_ids[i] for i in parts["test"]))
        for i in range(len(trainval)):
            for j in range(i + 1, len(trainval)):
                assert not (trainval[i] & trainval[j])
        # the test stimuli are one shared pool
        assert len(set(test_sets)) == 1
        # and never appear in anyone's train/val
        for tv in trainval:
            assert not (tv & set(test_sets[0]))

    def test_disjoint_infeasible(self):
        features = _features(50)
        datasets, _ = _datasets(features, n_per=40)
        with pytest.raises(NeuroDataError):
            split_dataset(datasets, SplitSpec("disjoint-stimuli", counts=(30, 5, 10)))

    def test_bad_mode(self):
        with pytest.raises(NeuroDataError):
            SplitSpec("sideways")

    def test_counts_xor_fractions(self):
        with pytest.raises(NeuroDataError):
            SplitSpec("same-stimuli")
        with pytest.raises(NeuroDataError):
            SplitSpec("same-stimuli", counts=(1, 1, 1), fractions=(0.8, 0.1, 0.1))


class TestBatches:
    def test_gather_alignment(self):
        features = _features(60)
        datasets, truth = _datasets(features, n_per=40)
        by_id = {ds.subject_id: ds for ds in datasets}
        ds = datasets[1]
        batch = gather_batch(by_id, features, [(ds.subject_id, 0), (ds.subject_id, 3)])
        np.testing.assert_array_equal(batch.patches[0], ds.responses[0])
        np.testing.assert_array_equal(batch.labels[1], ds.labels[3])
        row = features.index[ds.stimulus_ids[3]]
        np.testing.assert_array_equal(batch.f_hlv[1], features.f_hlv[row])

    def test_make_batches_covers_pool_once(self):
        features = _features(60)
        datasets, _ = _datasets(features, n_per=60)
        splits = split_dataset(datasets, SplitSpec("same-stimuli", counts=(40, 10, 10), seed=0))
        batches = make_batches(datasets, features, splits, 16, np.random.default_rng(0))
        # 120 pooled train samples, batch 16 -> 7 batches, tail of 8 dropped
        assert len(batches) == 7
        seen = []
        for b in batches:
            assert b.patches.shape[0] == 16
            seen.extend(zip(b.subject_index, b.stimulus_ids))
        assert len(set(seen)) == len(seen)

    def test_make_batches_deterministic_under_seed(self):
        features = _features(60)
        datasets, _ = _datasets(features, n_per=60)
        splits = split_dataset(datasets, SplitSpec("same-stimuli", counts=(40, 10, 10), seed=0))
        a = make_batches(datasets, features, splits, 8, np.random.default_rng(11))
        b = make_batches(datasets, features, splits, 8, np.random.default_rng(11))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.patches, y.patches)
            assert x.subject_index == y.subject_index

    def test_batch_size_floor(self):
        features = _features(60)
        datasets, _ = _datasets(features, n_per=60)
        splits = split_dataset(datasets, SplitSpec("same-stimuli", counts=(40, 10, 10), seed=0))
        with pytest.raises(NeuroDataError):
            make_batches(datasets, features, splits, 1, np.random.default_rng(0))


class TestSynthGenerate:
    def test_shapes_and_determinism(self):
        features = _features(60)
        d1, t1 = _datasets(features, n_per=40, n_patches=4, patch_dim=6, seed=9)
        d2, t2 = _datasets(features, n_per=40, n_patches=4, patch_dim=6, seed=9)
        assert d1[0].responses.shape == (40, 4, 6)
        for a, b in zip(d1, d2):
            np.testing.assert_array_equal(a.responses, b.responses)
            assert a.stimulus_ids == b.stimulus_ids
        np.testing.assert_array_equal(
            t1["subjects"]["sub_00"]["perm"], t2["subjects"]["sub_00"]["perm"]
        )

    def test_subject_maps_orthonormal(self):
        features = _features(40)
        for scramble in (0.0, 0.3, 1.0):
            _, truth = _datasets(features, n_per=30, subject_scramble=scramble)
            for rec in truth["subjects"].values():
                rot = rec["rot"]
                np.testing.assert_allclose(rot @ rot.T, np.eye(rot.shape[0]), atol=1e-12)

    def test_infinite_snr_recovers_latent(self):
        # with no noise, undoing the recorded permutation and rotation must
        # reproduce the shared latent exactly
        features = _features(50)
        datasets, truth = synth_generate(2, 30, 4, 6, features, snr=np.inf, seed=4)
        style_map, sem_codes = truth["style_map"], truth["sem_codes"]
        u = np.concatenate([features.f_llv @ style_map, features.labels @ sem_codes], axis=1)
        for ds in datasets:
            rec = truth["subjects"][ds.subject_id]
            undone = ds.responses @ rec["rot"]
            inv_perm = np.argsort(rec["perm"])
            undone = undone[:, inv_perm, :]
            expect = u[rec["rows"]].reshape(30, 4, 6)
            np.testing.assert_allclose(undone, expect, atol=1e-10)

    def test_snr_controls_noise_scale(self):
        features = _features(50)
        lo, _ = _datasets(features, n_per=40, seed=5)
        clean, truth = synth_generate(3, 40, 4, 6, features, snr=np.inf, seed=5)
        # same seed, same draws: the snr=5 responses differ from the clean ones
        # by noise whose std is close to signal_rms / 5
        u = np.concatenate(
            [features.f_llv @ truth["style_map"], features.labels @ truth["sem_codes"]], axis=1
        )
        signal_rms = np.sqrt((u**2).mean())
        diff = lo[0].responses - clean[0].responses
        assert diff.std() == pytest.approx(signal_rms / 5.0, rel=0.1)

    def test_nonpositive_snr(self):
        features = _features(20)
        with pytest.raises(NeuroDataError):
            synth_generate(1, 10, 2, 3, features, snr=0.0, seed=0)

    def test_labels_match_features(self):
        features = _features(50)
        datasets, truth = _datasets(features, n_per=30)
        for ds in datasets:
            rows = truth["subjects"][ds.subject_id]["rows"]
            np.testing.assert_array_equal(ds.labels, features.labels[rows])
            assert ds.stimulus_ids == [features.stimulus_ids[i] for i in rows]


class TestSubjectDataset:
    def test_rejects_bad_ndim(self):
        with pytest.raises(NeuroDataError):
            SubjectDataset("s", np.zeros((4, 5)), ["a"] * 4, np.zeros((4, 2)))

    def test_rejects_count_mismatch(self):
        with pytest.raises(NeuroDataError):
            SubjectDataset("s", np.zeros((4, 2, 3)), ["a"] * 3, np.zeros((4, 2)))
