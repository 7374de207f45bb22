import json

import numpy as np
import pytest

from pmcast.errors import ConfigError
from pmcast.ingest import align_panel, impute_gaps, parse_station_csv
from pmcast.similarity import pairwise_matrix
from pmcast.synth import (
    SynthSpec,
    generate,
    write_station_csvs,
    write_truth,
)


def _skew(x):
    x = np.asarray(x, dtype=np.float64)
    mu, sd = x.mean(), x.std()
    return float(np.mean((x - mu) ** 3) / sd**3)


class TestSpecValidation:
    def test_defaults_are_valid(self):
        SynthSpec().validate()

    @pytest.mark.parametrize("coef", [1.0, -1.0, 1.3])
    def test_ar_coef_range(self, coef):
        with pytest.raises(ConfigError):
            SynthSpec(ar_coef=coef).validate()

    def test_coupling_must_be_row_stochastic(self):
        with pytest.raises(ConfigError):
            SynthSpec(n_stations=2, coupling=[[0.5, 0.6], [0.5, 0.5]]).validate()
        with pytest.raises(ConfigError):
            SynthSpec(n_stations=2, coupling=[[1.5, -0.5], [0.5, 0.5]]).validate()
        with pytest.raises(ConfigError):
            SynthSpec(n_stations=3, coupling=[[1.0]]).validate()

    def test_other_bounds(self):
        for bad in [
            SynthSpec(gap_rate=1.0),
            SynthSpec(gap_max=0),
            SynthSpec(n_hours=1),
            SynthSpec(n_stations=0),
            SynthSpec(period=0.0),
            SynthSpec(station_noise=-1.0),
            SynthSpec(wd_modes=(90.0,)),
        ]:
            with pytest.raises(ConfigError):
                bad.validate()

    def test_dict_round_trip(self):
        spec = SynthSpec(n_stations=2, coupling=[[0.7, 0.3], [0.2, 0.8]], seed=5)
        back = SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        assert back == spec

    def test_per_station_params_round_trip(self):
        spec = SynthSpec(n_stations=2, amplitude=np.asarray([4.0, 6.0]))
        obj = spec.to_dict()
        assert obj["amplitude"] == [4.0, 6.0]
        back = SynthSpec.from_dict(obj)
        assert list(back.amplitude) == [4.0, 6.0]


class TestGenerate:
    def test_same_seed_is_bitwise_identical(self):
        spec = SynthSpec(n_stations=3, n_hours=300, gap_rate=0.04, seed=9)
        p1, t1 = generate(spec)
        p2, t2 = generate(spec)
        assert np.array_equal(p1.pm25, p2.pm25, equal_nan=True)
        assert np.array_equal(p1.met, p2.met)
        assert np.array_equal(t1.pm25, t2.pm25)
        assert np.array_equal(t1.latents, t2.latents)
        assert t1.gaps == t2.gaps
        assert t1.clamp_count == t2.clamp_count

    def test_different_seed_differs(self):
        p1, _ = generate(SynthSpec(n_hours=200, seed=1))
        p2, _ = generate(SynthSpec(n_hours=200, seed=2))
        assert not np.array_equal(p1.pm25, p2.pm25, equal_nan=True)

    def test_noise_free_spec_is_exact_sinusoid(self):
        spec = SynthSpec(
            n_stations=2, n_hours=96, base=30.0, amplitude=5.0,
            phase=np.asarray([0.0, 1.0]), ar_noise=0.0, station_noise=0.0,
            gap_rate=0.0,
        )
        panel, truth = generate(spec)
        t = np.arange(96, dtype=np.float64)
        for i, ph in enumerate([0.0, 1.0]):
            expected = 30.0 + 5.0 * np.sin(2 * np.pi * t / 24.0 + ph)
            assert np.allclose(panel.pm25[i], expected, atol=1e-12)
        assert truth.clamp_count == 0
        assert np.array_equal(truth.latents, np.zeros((2, 96)))

    def test_ar_lag1_autocorrelation(self):
        spec = SynthSpec(
            n_stations=1, n_hours=10000, ar_coef=0.9, ar_noise=2.0,
            coupling=[[1.0]], amplitude=0.0, station_noise=0.0, gap_rate=0.0,
        )
        _, truth = generate(spec)
        x = truth.latents[0]
        rho = float(np.corrcoef(x[:-1], x[1:])[0, 1])
        assert rho == pytest.approx(0.9, abs=0.05)
        assert np.std(x) == pytest.approx(2.0 / np.sqrt(1 - 0.81), rel=0.15)

    def test_negative_values_are_clamped_and_counted(self):
        spec = SynthSpec(
            n_stations=2, n_hours=400, base=2.0, amplitude=10.0,
            ar_noise=0.5, gap_rate=0.0, seed=3,
        )
        panel, truth = generate(spec)
        assert truth.clamp_count > 0
        assert float(np.min(panel.pm25)) == 0.0
        assert np.array_equal(panel.pm25, truth.pm25)

    def test_station_ids_and_index(self):
        panel, _ = generate(SynthSpec(n_stations=11, n_hours=10, start_hour=1234))
        assert panel.station_ids()[:2] == ["s00", "s01"]
        assert panel.station_ids()[-1] == "s10"
        assert panel.index[0] == 1234 and panel.n_hours == 10


class TestGapInjection:
    def _gappy(self):
        spec = SynthSpec(
            n_stations=2, n_hours=500, gap_rate=0.05, gap_max=3,
            amplitude=2.0, ar_noise=2.0, station_noise=1.0, seed=17,
        )
        return spec, *generate(spec)

    def test_recorded_gaps_match_blanks(self):
        _, panel, truth = self._gappy()
        assert truth.gaps
        total = 0
        for sid, start, length in truth.gaps:
            row = panel.station_row(sid)
            assert 1 <= length <= 3
            assert np.isnan(panel.pm25[row, start : start + length]).all()
            assert np.isfinite(truth.pm25[row, start : start + length]).all()
            if start > 0:
                assert not np.isnan(panel.pm25[row, start - 1])
            if start + length < panel.n_hours:
                assert not np.isnan(panel.pm25[row, start + length])
            total += length
        assert int(np.isnan(panel.pm25).sum()) == total

    def test_imputation_recovers_all_injected_gaps(self):
        spec, panel, truth = self._gappy()
        imputed, report = impute_gaps(panel, max_gap=spec.gap_max)
        assert not np.isnan(imputed.pm25).any()
        per_station = {sid: 0 for sid in panel.station_ids()}
        for sid, _, length in truth.gaps:
            per_station[sid] += length
        for sid, counts in report.stations.items():
            assert counts["filled_forward"] + counts["filled_backward"] == per_station[sid]
            assert counts["left_missing"] == 0
        errs = np.abs(imputed.pm25 - truth.pm25)[np.isnan(panel.pm25)]
        assert float(errs.mean()) < 3 * (spec.ar_noise + spec.station_noise)

    def test_zero_rate_means_no_gaps(self):
        panel, truth = generate(SynthSpec(n_hours=300, gap_rate=0.0))
        assert truth.gaps == []
        assert not np.isnan(panel.pm25).any()


@pytest.fixture(scope="module")
def met():
    panel, _ = generate(SynthSpec(n_stations=1, n_hours=4000, seed=4))
    return panel.met


class TestMetShapes:
    def test_wind_speed_right_skewed_and_positive(self, met):
        ws = met[:, 0]
        assert np.all(ws > 0)
        assert _skew(ws) > 0.5

    def test_temperature_noise_near_normal(self, met):
        t = np.arange(4000, dtype=np.float64)
        resid = met[:, 2] - (12.0 + 6.0 * np.sin(2 * np.pi * t / 24.0))
        assert abs(_skew(resid)) < 0.2

    def test_wind_direction_bimodal(self, met):
        wd = met[:, 1]
        assert np.all((wd >= 0) & (wd < 360))
        near_a = np.mean(np.abs(wd - 90.0) <= 60.0)
        near_b = np.mean(np.abs(wd - 270.0) <= 60.0)
        between = np.mean(np.abs(wd - 180.0) <= 30.0)
        assert near_a > 0.35 and near_b > 0.35
        assert between < 0.1


class TestCsvRoundTrip:
    def test_parse_back_is_bitwise_equal(self, tmp_path):
        spec = SynthSpec(n_stations=3, n_hours=120, gap_rate=0.05, seed=8)
        panel, _ = generate(spec)
        paths = write_station_csvs(panel, tmp_path)
        assert [p.split("/")[-1] for p in paths] == ["s00.csv", "s01.csv", "s02.csv"]
        per_station = {}
        for path in paths:
            sid = path.split("/")[-1][:-4]
            with open(path, "rb") as fh:
                series, _ = parse_station_csv(fh.read())
            per_station[sid] = series
        back = align_panel(
            per_station, (int(panel.index[0]), int(panel.index[-1]))
        )
        assert back.station_ids() == panel.station_ids()
        assert np.array_equal(back.index, panel.index)
        assert np.array_equal(back.pm25, panel.pm25, equal_nan=True)
        assert np.array_equal(back.met, panel.met)


class TestTruthSidecar:
    def test_sidecar_contents(self, tmp_path):
        spec = SynthSpec(n_stations=2, n_hours=200, gap_rate=0.05, seed=12)
        panel, truth = generate(spec)
        path = tmp_path / "truth.json"
        write_truth(spec, truth, path)
        obj = json.loads(path.read_text())
        assert set(obj) == {"spec", "clamp_count", "gaps"}
        assert obj["clamp_count"] == truth.clamp_count
        assert SynthSpec.from_dict(obj["spec"]) == spec
        assert len(obj["gaps"]) == len(truth.gaps)
        for entry, (sid, start, length) in zip(obj["gaps"], truth.gaps):
            row = panel.station_row(sid)
            assert entry["station"] == sid
            assert entry["values"] == truth.pm25[row, start : start + length].tolist()


class TestCouplingStructure:
    def test_coupled_stations_are_closer_in_dtw(self):
        coupling = [
            [0.5, 0.5, 0.0, 0.0],
            [0.5, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.5, 0.5],
            [0.0, 0.0, 0.5, 0.5],
        ]
        spec = SynthSpec(
            n_stations=4, n_hours=400, coupling=coupling, amplitude=0.0,
            ar_coef=0.85, ar_noise=6.0, station_noise=0.5, gap_rate=0.0, seed=2,
        )
        panel, _ = generate(spec)
        sim = pairwise_matrix(panel, window=(0, 400))
        d = sim.d
        within = [d[0, 1], d[2, 3]]
        across = [d[0, 2], d[0, 3], d[1, 2], d[1, 3]]
        assert max(within) < min(across)
