import io
import itertools
import math

import numpy as np
import pytest

from dfm.datagen import (
    DatasetSpec,
    NoteSample,
    bimodal_spec,
    default_spec,
    ground_truth_batch,
    ground_truth_sampler,
    load_dataset,
    make_dataset,
    read_samples_csv,
    save_dataset,
    write_samples_csv,
)
from dfm.errors import InputDomainError


class TestSpec:
    def test_default_shape(self):
        spec = default_spec()
        assert (spec.d, spec.n_classes, spec.n_pitches, spec.n_velocities, spec.sigma_data) == (2, 4, 12, 3, 0.1)
        assert len(spec.conditions) == 4 * 12 * 3

    def test_centroid_separation(self):
        spec = default_spec()
        c = np.array(spec.centroids)
        dmin = min(np.linalg.norm(a - b) for a, b in itertools.combinations(c, 2))
        assert dmin > 6 * spec.sigma_data

    def test_axes_unit(self):
        spec = DatasetSpec(d=3, pitch_axis=[1.0, 2.0, 2.0])
        assert np.linalg.norm(spec.pitch_axis) == pytest.approx(1.0, abs=1e-15)
        assert np.linalg.norm(spec.velocity_axis) == pytest.approx(1.0, abs=1e-15)

    def test_pitch_offsets_monotone(self):
        spec = default_spec()
        offs = [spec.pitch_offset(p) for p in range(spec.n_pitches)]
        assert all(b > a for a, b in zip(offs, offs[1:]))

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"d": 0},
            {"sigma_data": -1.0},
            {"modes_per_condition": 3},
            {"modes_per_condition": 2, "separation": 0.0},
            {"centroids": [[0.0, 0.0]] * 4},
            {"pitch_axis": [0.0, 0.0]},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(InputDomainError):
            DatasetSpec(**kwargs)

    def test_dict_roundtrip(self):
        spec = bimodal_spec(3)
        assert DatasetSpec.from_dict(spec.to_dict()) == spec
        with pytest.raises(InputDomainError):
            DatasetSpec.from_dict({"d": 2, "colour": 1})

    def test_bad_cond(self):
        with pytest.raises(InputDomainError):
            default_spec().check_cond((0, 12, 0))


class TestMakeDataset:
    def test_degenerate_noise(self):
        spec = DatasetSpec(sigma_data=0.0)
        for s in make_dataset(spec, 3):
            np.testing.assert_array_equal(s.x, spec.condition_mean(s.cond))

    def test_bimodal_moments(self):
        """Mixture of +-1 modes with sd 0.05: mean 0, sd sqrt(1 + 0.05^2)."""
        spec = bimodal_spec()
        xs = np.array([s.x[0] for s in make_dataset(spec, 20_000)])
        assert abs(xs.mean()) < 0.005
        assert xs.std() == pytest.approx(math.sqrt(1 + 0.0025), abs=0.005)
        assert np.sum(xs > 0) == 10_000

    def test_deterministic(self):
        a = make_dataset(DatasetSpec(seed=4), 2)
        b = make_dataset(DatasetSpec(seed=4), 2)
        c = make_dataset(DatasetSpec(seed=5), 2)
        assert all(np.array_equal(p.x, q.x) and p.cond == q.cond for p, q in zip(a, b))
        assert not all(np.array_equal(p.x, q.x) for p, q in zip(a, c))

    def test_bad_count(self):
        with pytest.raises(InputDomainError):
            make_dataset(default_spec(), 0)


class TestGroundTruth:
    def test_degenerate(self):
        spec = DatasetSpec(sigma_data=0.0)
        s = ground_truth_sampler(spec, (2, 5, 1), np.random.default_rng(0))
        np.testing.assert_array_equal(s.x, spec.condition_mean((2, 5, 1)))

    def test_mean_clt(self):
        spec = default_spec()
        xs = ground_truth_batch(spec, (1, 7, 2), 10_000, np.random.default_rng(0))
        assert np.all(np.abs(xs.mean(axis=0) - spec.condition_mean((1, 7, 2))) < 3 * spec.sigma_data / 100)

    def test_deterministic(self):
        spec = default_spec()
        a = ground_truth_batch(spec, (0, 0, 0), 5, np.random.default_rng(3))
        b = ground_truth_batch(spec, (0, 0, 0), 5, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_invalid_cond(self):
        with pytest.raises(InputDomainError):
            ground_truth_sampler(default_spec(), (4, 0, 0), np.random.default_rng(0))


class TestCSV:
    def test_roundtrip_with_spec(self, tmp_path):
        spec = default_spec()
        data = make_dataset(spec, 2)[:10]
        save_dataset(tmp_path / "d.csv", data, spec)
        got, got_spec = load_dataset(tmp_path / "d.csv")
        assert got_spec == spec
        for a, b in zip(data, got):
            np.testing.assert_array_equal(a.x, b.x)
            assert a.cond == b.cond

    def test_header(self):
        buf = io.StringIO()
        write_samples_csv(buf, [NoteSample(np.array([0.1, 0.2]), (0, 1, 2))])
        assert buf.getvalue().splitlines()[0] == "x0,x1,class_id,pitch_id,velocity_id"

    def test_empty(self):
        assert read_samples_csv(io.StringIO("")) == ([], None)
