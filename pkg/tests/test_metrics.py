"""Image metrics: scalar-loop and closed-form oracles, plus the
intensity-based volume measurement and its noise floor."""

import numpy as np
import pytest

from progdiff.grids import VolumeGrid
from progdiff.metrics import (
    MetricError,
    measure_prediction_volumes,
    measurement_noise_floor,
    mse,
    region_fractions,
    ssim3d,
)
from progdiff.phantom import (
    ALL_REGIONS,
    LABELS,
    PhantomSpec,
    build_region_templates,
    generate_subject,
)

SPEC = PhantomSpec()


def vol(data) -> VolumeGrid:
    return VolumeGrid(np.asarray(data, dtype=np.float32))


def rand_vol(seed, n=16) -> VolumeGrid:
    rng = np.random.default_rng(seed)
    return vol(rng.random((n, n, n)))


class TestMse:
    def test_identity_zero(self):
        x = rand_vol(0)
        assert mse(x, x) == 0.0

    def test_constant_offset(self):
        # scale into [0, 0.5] first so the +0.1 offset survives in [0, 1]
        x = vol(rand_vol(1).data * 0.5)
        y = vol(x.data + 0.1)
        assert mse(x, y) == pytest.approx(0.01, abs=1e-9)

    def test_scalar_loop_oracle(self):
        x, y = rand_vol(2, 8), rand_vol(3, 8)
        acc = 0.0
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    acc += (float(x.data[i, j, k]) - float(y.data[i, j, k])) ** 2
        assert mse(x, y) == pytest.approx(acc / 512, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(MetricError, match="shape"):
            mse(rand_vol(0, 16), rand_vol(0, 8))


class TestSsim:
    def test_identity_one(self):
        x = rand_vol(4)
        assert ssim3d(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_constant_fields_closed_form(self):
        """For constant images a, b: variances vanish, so
        SSIM = [(2ab + C1) C2] / [(a^2 + b^2 + C1) C2]."""
        a, b = 0.3, 0.8
        x, y = vol(np.full((16,) * 3, a)), vol(np.full((16,) * 3, b))
        c1 = (0.01 * 1.0) ** 2
        want = (2 * a * b + c1) / (a**2 + b**2 + c1)
        assert ssim3d(x, y) == pytest.approx(want, abs=1e-7)

    def test_symmetry(self):
        x, y = rand_vol(5), rand_vol(6)
        assert ssim3d(x, y) == pytest.approx(ssim3d(y, x), abs=1e-12)

    def test_bounded(self):
        x, y = rand_vol(7), rand_vol(8)
        assert -1.0 <= ssim3d(x, y) <= 1.0

    def test_window_too_large(self):
        with pytest.raises(MetricError, match="window"):
            ssim3d(rand_vol(0, 8), rand_vol(1, 8), window=9)

    def test_degrades_with_noise(self):
        x = rand_vol(9)
        rng = np.random.default_rng(0)
        y1 = vol(np.clip(x.data + 0.01 * rng.standard_normal(x.shape), 0, 1))
        y2 = vol(np.clip(x.data + 0.2 * rng.standard_normal(x.shape), 0, 1))
        assert ssim3d(x, y1) > ssim3d(x, y2)


class TestRegionFractions:
    def test_matches_stored_fractions(self):
        visits, _ = generate_subject(SPEC, 13, "AD", 2)
        for v in visits:
            got = region_fractions(v.labels)
            for r in ALL_REGIONS:
                assert got[r] == pytest.approx(v.fractions[r], abs=1e-12)

    def test_empty_region_is_zero(self):
        labels = np.zeros((16,) * 3, np.uint8)
        labels[4:12, 4:12, 4:12] = LABELS["cerebral_white_matter"]
        got = region_fractions(labels)
        assert got["hippocampus"] == 0.0
        assert got["cerebral_white_matter"] == 1.0

    def test_unknown_label_listed(self):
        labels = np.zeros((16,) * 3, np.uint8)
        labels[0, 0, 0] = 99
        with pytest.raises(MetricError, match="99"):
            region_fractions(labels)

    def test_empty_brain_rejected(self):
        with pytest.raises(MetricError, match="no brain"):
            region_fractions(np.zeros((16,) * 3, np.uint8))


@pytest.fixture(scope="module")
def templates():
    return build_region_templates(SPEC)


class TestVolumeMeasurement:
    def test_all_zero_volume_degenerate(self, templates):
        out = measure_prediction_volumes(
            vol(np.zeros((SPEC.grid,) * 3)), SPEC, templates
        )
        assert out.degenerate

    def test_raw_phantom_within_noise_floor(self, templates):
        """Self-consistency: measurement on raw phantoms agrees with the
        exact voxel-count truth to within a small absolute floor."""
        vols, truths = [], []
        for i in range(6):
            visits, _ = generate_subject(SPEC, 100 + i, ["CN", "MCI", "AD"][i % 3], 2)
            for v in visits:
                vols.append(v.volume)
                truths.append(v.fractions)
        floor = measurement_noise_floor(SPEC, vols, truths, templates)
        for r in ALL_REGIONS:
            assert floor[r] < 0.006, (r, floor[r])

    def test_monotone_series_passes_through(self, templates):
        """A real aging AD phantom must yield a measured ventricle series
        monotone within the documented floor."""
        ages = [66.0, 70.0, 74.0, 78.0, 82.0]
        visits, _ = generate_subject(SPEC, 77, "AD", len(ages), visit_ages=ages)
        measured = [
            measure_prediction_volumes(v.volume, SPEC, templates)
            .fractions["lateral_ventricles"]
            for v in visits
        ]
        floor = 0.004
        assert all(b >= a - floor for a, b in zip(measured, measured[1:]))
        assert measured[-1] > measured[0]
