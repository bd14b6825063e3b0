import numpy as np
import pytest

from mmfusion.index import GroundTruth, index_map, similarity_matrix
from mmfusion.synthdata import SynthSpec, generate


class TestSpec:
    def test_broadcast(self):
        s = SynthSpec(views=3, dims=[10], intra_noise=0.1, view_corruption=[0, 0, 1])
        assert s.dims == [10, 10, 10] and s.intra_noise == [0.1] * 3
        assert s.n_images == 100
        assert s.nonzeros(128) == 32

    @pytest.mark.parametrize("kw", [
        {"n_clusters": 0}, {"views": 2, "dims": [10, 10, 10]}, {"view_corruption": [1.5]},
        {"intra_noise": [-1]}, {"sparsity": 0}, {"sparsity": 1.2}, {"dims": [3], "sparsity": 0.25},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)

    def test_labels(self):
        np.testing.assert_array_equal(SynthSpec(n_clusters=2, per_cluster=3).labels(), [0, 0, 0, 1, 1, 1])


class TestGenerate:
    def test_shapes_norms_sparsity(self):
        spec = SynthSpec(n_clusters=5, views=2, dims=[40, 64], intra_noise=[0.3], view_corruption=[0.5])
        xs, truth = generate(spec)
        assert [x.shape for x in xs] == [(40, 20), (64, 20)]
        for x, d in zip(xs, spec.dims):
            np.testing.assert_allclose(x.column_norms, 1.0, atol=1e-12)
            counts = np.count_nonzero(x.to_dense(), axis=0)
            assert np.all(counts <= spec.sparsity * d)
        assert len(truth.queries()) == 20

    def test_deterministic(self):
        spec = SynthSpec(n_clusters=4, intra_noise=[0.2], view_corruption=[0.3], seed=9)
        a, ta = generate(spec)
        b, tb = generate(spec)
        assert all(x == y for x, y in zip(a, b))
        assert ta == tb

    def test_seed_changes_data(self):
        a, _ = generate(SynthSpec(n_clusters=4, seed=1))
        b, _ = generate(SynthSpec(n_clusters=4, seed=2))
        assert a[0] != b[0]

    def test_adding_view_keeps_earlier_views(self):
        a, _ = generate(SynthSpec(n_clusters=4, views=2, intra_noise=[0.2]))
        b, _ = generate(SynthSpec(n_clusters=4, views=3, intra_noise=[0.2, 0.2, 0.0],
                                  view_corruption=[0, 0, 1]))
        assert a[0] == b[0] and a[1] == b[1]

    def test_truth_partitions(self):
        _, truth = generate(SynthSpec(n_clusters=6))
        groups = {frozenset(r) for r in truth.relevant.values()}
        members = sorted(i for g in groups for i in g)
        assert members == list(range(24))
        assert all(q in truth.relevant[q] for q in truth.queries())
        assert isinstance(truth, GroundTruth)

    def test_clean_clusters_separate(self):
        spec = SynthSpec(n_clusters=2, views=3)
        xs, _ = generate(spec)
        labels = spec.labels()
        same = labels[:, None] == labels[None, :]
        for x in xs:
            sims = similarity_matrix(x)
            assert sims[same].min() > sims[~same].max()

    def test_corruption_count(self):
        xs, _ = generate(SynthSpec(n_clusters=10, views=1, view_corruption=[0.3]))
        clean, _ = generate(SynthSpec(n_clusters=10, views=1))
        differs = np.any(xs[0].to_dense() != clean[0].to_dense(), axis=0)
        assert differs.sum() == 12

    def test_full_corruption_is_chance(self):
        spec = SynthSpec(n_clusters=25, views=3, intra_noise=[0.2], view_corruption=[0, 0, 1])
        xs, truth = generate(spec)
        maps = [index_map(x, truth) for x in xs]
        # chance mAP for 4 relevant (one is the self-match at rank 1) is far below the healthy views
        assert maps[2] < 0.4
        assert maps[0] > 0.7 and maps[1] > 0.7

    def test_map_monotone_in_noise(self):
        maps = []
        for noise in (0.0, 0.1, 0.2, 0.4, 0.8):
            xs, truth = generate(SynthSpec(n_clusters=25, views=1, intra_noise=[noise], seed=3))
            maps.append(index_map(xs[0], truth))
        assert all(b <= a + 1e-12 for a, b in zip(maps, maps[1:]))
