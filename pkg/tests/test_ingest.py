import numpy as np
import pytest

from pmcast.errors import (
    AllStationsExcluded,
    BadTimestamp,
    EmptyFile,
    EmptyRange,
    MissingColumn,
    NoStations,
)
from pmcast.ingest import (
    HourlyPanel,
    StationMeta,
    StationSeries,
    align_panel,
    filter_stations,
    hour_to_iso,
    impute_gaps,
    load_panel,
    parse_station_csv,
    save_panel,
)

H0 = 429528  # 2019-01-01T00:00:00Z in epoch hours


def _csv(*lines):
    return ("\n".join(lines) + "\n").encode()


class TestParse:
    def test_basic_row(self):
        series, report = parse_station_csv(
            _csv("timestamp,pm25,ws,wd,temp", "2019-01-01T00:00:00Z,41.5,2.0,180.0,-3.5")
        )
        assert series.ts.tolist() == [H0]
        assert series.pm25.tolist() == [41.5]
        assert series.met.tolist() == [[2.0, 180.0, -3.5]]
        assert report.rows == 1
        assert report.bad_numeric_cells == 0

    def test_offset_and_naive_timestamps_agree(self):
        a, _ = parse_station_csv(_csv("timestamp,pm25", "2019-01-01T03:00:00+00:00,1"))
        b, _ = parse_station_csv(_csv("timestamp,pm25", "2019-01-01 03:00:00,1"))
        c, _ = parse_station_csv(_csv("timestamp,pm25", "2019-01-01T05:00:00+02:00,1"))
        assert a.ts[0] == b.ts[0] == c.ts[0] == H0 + 3

    def test_bad_timestamp_reports_row_and_value(self):
        with pytest.raises(BadTimestamp) as exc:
            parse_station_csv(_csv("timestamp,pm25", "2019-01-01T00:00:00Z,1", "not-a-date,2"))
        assert exc.value.row == 1
        assert "not-a-date" in str(exc.value)

    def test_unparseable_numeric_becomes_missing(self):
        series, report = parse_station_csv(
            _csv("timestamp,pm25,ws", "2019-01-01T00:00:00Z,oops,x")
        )
        assert np.isnan(series.pm25[0])
        assert np.isnan(series.met[0, 0])
        assert report.bad_numeric_cells == 2

    def test_negative_pm25_dropped_and_counted(self):
        series, report = parse_station_csv(
            _csv("timestamp,pm25", "2019-01-01T00:00:00Z,-4.0", "2019-01-01T01:00:00Z,0.0")
        )
        assert np.isnan(series.pm25[0])
        assert series.pm25[1] == 0.0
        assert report.negative_pm25 == 1

    def test_empty_cells_and_absent_met_columns(self):
        series, _ = parse_station_csv(_csv("timestamp,pm25", "2019-01-01T00:00:00Z,"))
        assert np.isnan(series.pm25[0])
        assert np.isnan(series.met).all()

    def test_wind_direction_wraps_into_range(self):
        series, _ = parse_station_csv(
            _csv("timestamp,pm25,wd", "2019-01-01T00:00:00Z,1,360.0", "2019-01-01T01:00:00Z,1,365.5")
        )
        assert series.met[0, 1] == 0.0
        assert series.met[1, 1] == 5.5

    def test_schema_remaps_column_names(self):
        series, _ = parse_station_csv(
            _csv("time,PM2.5", "2019-01-01T00:00:00Z,7.5"),
            schema={"timestamp": "time", "pm25": "PM2.5"},
        )
        assert series.pm25.tolist() == [7.5]

    def test_missing_required_column(self):
        with pytest.raises(MissingColumn):
            parse_station_csv(_csv("timestamp,ws", "2019-01-01T00:00:00Z,1"))

    def test_empty_file(self):
        with pytest.raises(EmptyFile):
            parse_station_csv(b"")

    def test_blank_lines_skipped(self):
        series, report = parse_station_csv(
            _csv("timestamp,pm25", "", "2019-01-01T00:00:00Z,3.0", "  ,  ")
        )
        assert report.rows == 1
        assert series.pm25.tolist() == [3.0]


def _series(hours, pm, met=None):
    n = len(hours)
    m = np.full((n, 3), np.nan) if met is None else np.asarray(met, dtype=float)
    return StationSeries(
        ts=np.asarray(hours, dtype=np.int64),
        pm25=np.asarray(pm, dtype=float),
        met=m,
    )


class TestAlign:
    def test_reindexes_onto_hourly_grid(self):
        panel = align_panel({"a": _series([H0, H0 + 2], [1.0, 3.0])}, (H0, H0 + 3))
        assert panel.index.tolist() == [H0, H0 + 1, H0 + 2, H0 + 3]
        row = panel.pm25[0]
        assert row[0] == 1.0 and row[2] == 3.0
        assert np.isnan(row[1]) and np.isnan(row[3])
        assert panel.stations[0].missing_fraction == 0.5

    def test_duplicate_timestamps_keep_last(self):
        panel = align_panel({"a": _series([H0, H0], [1.0, 9.0])}, (H0, H0 + 1))
        assert panel.pm25[0, 0] == 9.0

    def test_records_outside_range_ignored(self):
        panel = align_panel({"a": _series([H0 - 1, H0, H0 + 5], [7.0, 1.0, 7.0])}, (H0, H0 + 1))
        assert panel.pm25[0].tolist() == [1.0, np.nan] or (
            panel.pm25[0, 0] == 1.0 and np.isnan(panel.pm25[0, 1])
        )

    def test_met_is_panel_wide_with_later_station_override(self):
        first = _series([H0], [1.0], [[2.0, 90.0, 10.0]])
        second = _series([H0], [2.0], [[5.0, np.nan, np.nan]])
        panel = align_panel({"a": first, "b": second}, (H0, H0 + 1))
        assert panel.met[0].tolist() == [5.0, 90.0, 10.0]

    def test_row_order_follows_dict_order(self):
        panel = align_panel(
            {"b": _series([H0], [1.0]), "a": _series([H0], [2.0])}, (H0, H0 + 1)
        )
        assert panel.station_ids() == ["b", "a"]
        assert panel.pm25[0, 0] == 1.0 and panel.pm25[1, 0] == 2.0

    def test_empty_range_rejected(self):
        with pytest.raises(EmptyRange):
            align_panel({"a": _series([H0], [1.0])}, (H0, H0))

    def test_no_stations_rejected(self):
        with pytest.raises(NoStations):
            align_panel({}, (H0, H0 + 1))


class TestImpute:
    def _panel(self, pm_rows, met=None):
        pm = np.asarray(pm_rows, dtype=float)
        n_hours = pm.shape[1]
        return HourlyPanel(
            stations=[StationMeta(id=f"s{i}") for i in range(pm.shape[0])],
            index=np.arange(H0, H0 + n_hours, dtype=np.int64),
            pm25=pm,
            met=np.full((n_hours, 3), np.nan) if met is None else np.asarray(met, dtype=float),
        )

    def test_short_gap_forward_filled(self):
        panel = self._panel([[1.0, np.nan, 3.0]])
        out, report = impute_gaps(panel, max_gap=1)
        assert out.pm25[0].tolist() == [1.0, 1.0, 3.0]
        assert report.stations["s0"] == {
            "filled_forward": 1, "filled_backward": 0, "left_missing": 0,
        }

    def test_leading_gap_backward_filled(self):
        panel = self._panel([[np.nan, 2.0]])
        out, report = impute_gaps(panel, max_gap=1)
        assert out.pm25[0].tolist() == [2.0, 2.0]
        assert report.stations["s0"]["filled_backward"] == 1

    def test_long_gap_left_missing(self):
        row = [1.0] + [np.nan] * 10 + [3.0]
        out, report = impute_gaps(self._panel([row]), max_gap=6)
        assert np.array_equal(out.pm25[0], np.asarray(row), equal_nan=True)
        assert report.stations["s0"]["left_missing"] == 10

    def test_run_equal_to_max_gap_is_filled(self):
        row = [5.0] + [np.nan] * 3 + [9.0]
        out, _ = impute_gaps(self._panel([row]), max_gap=3)
        assert out.pm25[0].tolist() == [5.0, 5.0, 5.0, 5.0, 9.0]

    def test_trailing_gap_filled_from_left(self):
        out, _ = impute_gaps(self._panel([[4.0, np.nan, np.nan]]), max_gap=2)
        assert out.pm25[0].tolist() == [4.0, 4.0, 4.0]

    def test_all_missing_series_untouched(self):
        out, report = impute_gaps(self._panel([[np.nan, np.nan]]), max_gap=5)
        assert np.isnan(out.pm25[0]).all()
        assert report.stations["s0"]["left_missing"] == 2

    def test_max_gap_zero_changes_nothing(self):
        row = [1.0, np.nan, 3.0]
        out, _ = impute_gaps(self._panel([row]), max_gap=0)
        assert np.array_equal(out.pm25[0], np.asarray(row), equal_nan=True)

    def test_met_columns_imputed_independently(self):
        met = [[1.0, np.nan, np.nan], [np.nan, 90.0, np.nan], [3.0, 90.0, np.nan]]
        out, report = impute_gaps(self._panel([[1.0, 1.0, 1.0]], met=met), max_gap=1)
        assert out.met[:, 0].tolist() == [1.0, 1.0, 3.0]
        assert out.met[:, 1].tolist() == [90.0, 90.0, 90.0]
        assert np.isnan(out.met[:, 2]).all()
        assert report.met["temp"]["left_missing"] == 3

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        row = rng.uniform(0, 50, size=200)
        row[rng.random(200) < 0.3] = np.nan
        once, _ = impute_gaps(self._panel([row]), max_gap=4)
        twice, _ = impute_gaps(once, max_gap=4)
        assert np.array_equal(once.pm25, twice.pm25, equal_nan=True)

    def test_input_panel_not_mutated(self):
        panel = self._panel([[1.0, np.nan, 3.0]])
        before = panel.pm25.copy()
        impute_gaps(panel, max_gap=1)
        assert np.array_equal(panel.pm25, before, equal_nan=True)

    @pytest.mark.parametrize("seed", range(30))
    def test_random_gap_patterns_obey_fill_rules(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(10, 120))
        max_gap = int(rng.integers(0, 7))
        values = rng.uniform(0, 80, size=n)
        mask = rng.random(n) < rng.uniform(0.05, 0.5)
        values[mask] = np.nan
        out, report = impute_gaps(self._panel([values]), max_gap=max_gap)
        filled = out.pm25[0]

        present = ~np.isnan(values)
        assert np.array_equal(filled[present], values[present])

        counts = {"filled_forward": 0, "filled_backward": 0, "left_missing": 0}
        i = 0
        while i < n:
            if present[i]:
                i += 1
                continue
            j = i
            while j < n and not present[j]:
                j += 1
            run = j - i
            if run > max_gap or (i == 0 and j == n):
                assert np.isnan(filled[i:j]).all()
                counts["left_missing"] += run
            elif i > 0:
                assert (filled[i:j] == values[i - 1]).all()
                counts["filled_forward"] += run
            else:
                assert (filled[i:j] == values[j]).all()
                counts["filled_backward"] += run
            i = j
        assert report.stations["s0"] == counts


class TestFilter:
    def _panel(self, fractions):
        n_st = len(fractions)
        pm = np.zeros((n_st, 4))
        return HourlyPanel(
            stations=[
                StationMeta(id=f"s{i}", missing_fraction=f) for i, f in enumerate(fractions)
            ],
            index=np.arange(H0, H0 + 4, dtype=np.int64),
            pm25=pm + np.arange(n_st)[:, None],
            met=np.zeros((4, 3)),
        )

    def test_threshold_is_inclusive(self):
        out = filter_stations(self._panel([0.2, 0.25, 0.3]), max_missing_frac=0.25)
        assert out.station_ids() == ["s0", "s1"]
        assert [s.id for s in out.excluded] == ["s2"]
        assert out.excluded[0].included is False
        assert out.pm25[1, 0] == 1.0

    def test_all_excluded_raises(self):
        with pytest.raises(AllStationsExcluded):
            filter_stations(self._panel([0.5, 0.9]), max_missing_frac=0.1)


class TestRoundTrip:
    def test_save_load_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        pm = rng.uniform(0, 99, size=(3, 48))
        pm[rng.random(pm.shape) < 0.2] = np.nan
        met = rng.normal(size=(48, 3))
        met[rng.random(met.shape) < 0.2] = np.nan
        panel = HourlyPanel(
            stations=[StationMeta(id=s, missing_fraction=0.1) for s in ("a", "b", "c")],
            index=np.arange(H0, H0 + 48, dtype=np.int64),
            pm25=pm,
            met=met,
            excluded=[StationMeta(id="z", missing_fraction=0.9, included=False)],
        )
        save_panel(panel, tmp_path / "panel.csv", tmp_path / "meta.json")
        loaded = load_panel(tmp_path / "panel.csv", tmp_path / "meta.json")
        assert np.array_equal(loaded.pm25, panel.pm25, equal_nan=True)
        assert np.array_equal(loaded.met, panel.met, equal_nan=True)
        assert loaded.index.tolist() == panel.index.tolist()
        assert loaded.station_ids() == ["a", "b", "c"]
        assert loaded.excluded[0].id == "z"

    def test_hour_to_iso(self):
        assert hour_to_iso(H0) == "2019-01-01T00:00:00Z"
