import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from cbpnet.errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    StateError,
)
from cbpnet.harness import (
    AccuracyMatrix,
    DatasetContainer,
    MetricsReport,
    avg_accuracy,
    curves_svg,
    emit_report,
    forgetting,
    generate_synthetic,
    load_container,
    read_matrix_csv,
    save_container,
    split_class_incremental,
    write_matrix_csv,
)


def small_ds(classes=5, per_class=8):
    return generate_synthetic(classes, per_class, (8, 8, 1), seed=7)


class TestContainer:
    def test_round_trip(self, tmp_path):
        ds = DatasetContainer(
            np.arange(4 * 2 * 3 * 1, dtype=np.uint8).reshape(4, 2, 3, 1),
            np.array([0, 1, 2, 1], dtype=np.uint16), 3,
        )
        path = tmp_path / "d.clds"
        save_container(ds, path)
        loaded = load_container(path)
        np.testing.assert_array_equal(loaded.images, ds.images)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        assert loaded.class_count == 3

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.clds"
        path.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(FormatError):
            load_container(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.clds"
        save_container(small_ds(2, 2), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_container(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.clds"
        save_container(small_ds(2, 2), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(CorruptionError):
            load_container(path)

    def test_flipped_byte(self, tmp_path):
        path = tmp_path / "c.clds"
        save_container(small_ds(2, 2), path)
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptionError):
            load_container(path)

    def test_label_bound_names_record(self):
        with pytest.raises(DataError, match="record 2"):
            DatasetContainer(np.zeros((3, 2, 2, 1), dtype=np.uint8),
                             np.array([0, 1, 10], dtype=np.uint16), 10)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            DatasetContainer(np.zeros((0, 2, 2, 1), dtype=np.uint8),
                             np.zeros(0, dtype=np.uint16), 2)


class TestSynthetic:
    def test_same_seed_identical(self):
        a = generate_synthetic(4, 6, (8, 8, 1), seed=3)
        b = generate_synthetic(4, 6, (8, 8, 1), seed=3)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = generate_synthetic(4, 6, (8, 8, 1), seed=3)
        b = generate_synthetic(4, 6, (8, 8, 1), seed=4)
        assert not np.array_equal(a.images, b.images)

    def test_label_histogram(self):
        ds = generate_synthetic(5, 7, (4, 4, 1), seed=0)
        counts = np.bincount(ds.labels, minlength=5)
        np.testing.assert_array_equal(counts, 7)

    def test_two_classes_linearly_separable(self):
        # nearest-class-mean probe on held-out halves
        ds = generate_synthetic(2, 40, (8, 8, 1), seed=11, noise=30.0)
        x = ds.images.reshape(len(ds.images), -1).astype(float)
        y = np.asarray(ds.labels)
        train = np.concatenate([np.flatnonzero(y == k)[:20] for k in (0, 1)])
        test = np.setdiff1d(np.arange(len(y)), train)
        means = np.stack([x[train][y[train] == k].mean(axis=0) for k in (0, 1)])
        d = ((x[test, None, :] - means[None]) ** 2).sum(axis=2)
        acc = np.mean(np.argmin(d, axis=1) == y[test])
        assert acc > 0.95

    def test_min_classes(self):
        with pytest.raises(ConfigError):
            generate_synthetic(1, 4, (4, 4, 1), seed=0)


class TestSplit:
    def test_partition_sizes(self):
        ds = small_ds(classes=12, per_class=10)
        split = split_class_incremental(ds, base=2, t_count=5, seed=1)
        assert len(split.spec.base_classes) == 2
        assert [len(c) for c in split.spec.task_classes] == [2] * 5

    def test_disjoint_classes(self):
        ds = small_ds(classes=10, per_class=5)
        split = split_class_incremental(ds, base=2, t_count=4, seed=2)
        seen = list(split.spec.base_classes)
        for classes in split.spec.task_classes:
            seen.extend(classes)
        assert len(seen) == len(set(seen))

    def test_same_seed_identical(self):
        ds = small_ds(classes=10, per_class=10)
        a = split_class_incremental(ds, 2, 4, seed=5)
        b = split_class_incremental(ds, 2, 4, seed=5)
        assert a.spec.task_classes == b.spec.task_classes
        for (atr, ate), (btr, bte) in zip(a.tasks, b.tasks):
            np.testing.assert_array_equal(atr[0], btr[0])
            np.testing.assert_array_equal(ate[1], bte[1])

    def test_within_class_80_20(self):
        ds = small_ds(classes=6, per_class=10)
        split = split_class_incremental(ds, 0, 3, seed=0)
        for (tr_i, tr_l), (te_i, te_l) in split.tasks:
            assert len(tr_l) == 2 * 8 and len(te_l) == 2 * 2

    def test_no_base(self):
        ds = small_ds(classes=6, per_class=5)
        split = split_class_incremental(ds, 0, 3, seed=0)
        assert split.base_train is None and split.base_test is None

    def test_not_enough_classes(self):
        ds = small_ds(classes=4, per_class=5)
        with pytest.raises(ConfigError):
            split_class_incremental(ds, 3, 4, seed=0)


def filled_matrix(values):
    mx = AccuracyMatrix(len(values))
    for i, row in enumerate(values):
        for t, v in enumerate(row):
            mx.set(i, t, v)
    return mx


class TestMatrix:
    def test_above_diagonal_rejected(self):
        mx = AccuracyMatrix(3)
        with pytest.raises(StateError):
            mx.set(0, 1, 0.5)

    def test_range_check(self):
        mx = AccuracyMatrix(2)
        with pytest.raises(DataError):
            mx.set(1, 0, 1.5)

    def test_unfilled_get(self):
        with pytest.raises(StateError):
            AccuracyMatrix(2).get(1, 0)

    def test_just_learned_and_final_row(self):
        mx = filled_matrix([[0.9], [0.7, 0.8]])
        assert mx.just_learned() == [0.9, 0.8]
        assert mx.final_row() == [0.7, 0.8]


class TestMetrics:
    def test_avg_accuracy_example(self):
        mx = filled_matrix([[0.9], [0.7, 0.8]])
        assert avg_accuracy(mx) == pytest.approx(0.75)

    def test_avg_accuracy_all_ones(self):
        mx = filled_matrix([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]])
        assert avg_accuracy(mx) == 1.0

    def test_avg_accuracy_single_task(self):
        assert avg_accuracy(filled_matrix([[0.6]])) == pytest.approx(0.6)

    def test_avg_accuracy_incomplete_final_row(self):
        mx = AccuracyMatrix(2)
        mx.set(0, 0, 0.9)
        mx.set(1, 1, 0.8)  # (1, 0) missing
        with pytest.raises(StateError):
            avg_accuracy(mx)

    def test_forgetting_example(self):
        mx = filled_matrix([[0.9], [0.7, 0.8]])
        assert forgetting(mx) == pytest.approx(0.2)

    def test_forgetting_zero_without_degradation(self):
        mx = filled_matrix([[0.5], [0.5, 0.6], [0.5, 0.6, 0.7]])
        assert forgetting(mx) == pytest.approx(0.0)

    def test_forgetting_needs_two_tasks(self):
        with pytest.raises(StateError):
            forgetting(filled_matrix([[0.9]]))

    def test_forgetting_non_negative_when_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            size = 4
            mx = AccuracyMatrix(size)
            for t in range(size):
                peak = rng.uniform(0.5, 1.0)
                for i in range(t, size):
                    mx.set(i, t, peak if i == t else rng.uniform(0.0, peak))
            assert forgetting(mx) >= 0.0


class TestReports:
    def report(self):
        mx = filled_matrix([[0.9], [0.7, 0.8]])
        return MetricsReport(matrix=mx, config={"seed": 1}, seed=1,
                             variant="cbpnet", wall_clock=1.5)

    def test_csv_round_trip(self, tmp_path):
        mx = filled_matrix([[0.9], [0.7, 0.8], [0.61, 0.52, 0.43]])
        path = tmp_path / "matrix.csv"
        write_matrix_csv(mx, path)
        again = read_matrix_csv(path)
        for i, t, v in mx.filled_cells():
            assert again.get(i, t) == v

    def test_csv_header_and_row_count(self, tmp_path):
        mx = filled_matrix([[0.9], [0.7, 0.8], [0.6, 0.5, 0.4]])
        path = tmp_path / "matrix.csv"
        write_matrix_csv(mx, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "after_task,task,accuracy"
        assert len(lines) - 1 == 3 * 4 // 2

    def test_csv_bad_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("foo,bar\n1,1,0.5\n")
        with pytest.raises(FormatError):
            read_matrix_csv(path)

    def test_emit_report_files_consistent(self, tmp_path):
        emit_report(self.report(), tmp_path)
        doc = json.loads((tmp_path / "metrics.json").read_text())
        mx = read_matrix_csv(tmp_path / "matrix.csv")
        assert doc["average_accuracy"] == pytest.approx(avg_accuracy(mx), abs=1e-12)
        assert doc["forgetting"] == pytest.approx(forgetting(mx), abs=1e-12)

    def test_emit_report_unwritable(self, tmp_path):
        from cbpnet.errors import IoError

        target = tmp_path / "file"
        target.write_text("x")  # a plain file where a directory must go
        with pytest.raises(IoError):
            emit_report(self.report(), target / "sub")

    def test_svg_well_formed_one_polyline_per_curve(self):
        svg = curves_svg({"a": [0.5, 0.6], "b": [0.7, 0.4], "c": [0.2, 0.9]})
        root = ET.fromstring(svg)
        polylines = root.findall(".//{http://www.w3.org/2000/svg}polyline")
        assert len(polylines) == 3


class TestCli:
    def config_file(self, tmp_path, tasks=2):
        doc = {
            "backbone": {"image_size": 8, "patch_size": 4, "channels": 1,
                         "depth": 3, "dim": 8, "heads": 2, "mlp_ratio": 2.0},
            "prompts": {"g_length": 2, "e_length": 2, "g_layers": [0],
                        "e_layers": [1, 2]},
            "cbp": {"m": 2, "rho": 0.01, "hidden": 2},
            "train": {"epochs": 2, "batch": 8, "lr": 0.01, "lambda": 0.1},
            "data": {"classes": 6, "per_class": 12, "height": 8, "width": 8,
                     "channels": 1, "base_classes": 2, "tasks": 2},
            "pretrain_epochs": 2,
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def test_run_twice_byte_identical_matrix(self, tmp_path):
        from cbpnet.cli import cli_main

        cfg = self.config_file(tmp_path)
        outs = [str(tmp_path / d) for d in ("a", "b")]
        for out in outs:
            assert cli_main(["run", "--config", cfg, "--seed", "7",
                             "--out", out]) == 0
        blobs = [(tmp_path / d / "matrix.csv").read_bytes() for d in ("a", "b")]
        assert blobs[0] == blobs[1]

    def test_run_emits_all_artifacts(self, tmp_path):
        from cbpnet.cli import cli_main

        out = tmp_path / "out"
        assert cli_main(["run", "--config", self.config_file(tmp_path),
                         "--out", str(out)]) == 0
        for name in ("metrics.json", "matrix.csv", "curves.svg"):
            assert (out / name).exists()

    def test_report_recomputes(self, tmp_path, capsys):
        from cbpnet.cli import cli_main

        out = tmp_path / "out"
        cli_main(["run", "--config", self.config_file(tmp_path), "--out", str(out)])
        capsys.readouterr()
        assert cli_main(["report", "--matrix", str(out / "matrix.csv")]) == 0
        doc = json.loads(capsys.readouterr().out)
        metrics = json.loads((out / "metrics.json").read_text())
        assert doc["average_accuracy"] == pytest.approx(
            metrics["average_accuracy"], abs=1e-12)

    def test_params_exit_zero(self, capsys):
        from cbpnet.cli import cli_main

        assert cli_main(["params"]) == 0
        assert "active_ratio" in capsys.readouterr().out

    def test_unknown_subcommand_exit_2(self):
        from cbpnet.cli import cli_main

        assert cli_main(["frobnicate"]) == 2

    def test_no_subcommand_exit_2(self):
        from cbpnet.cli import cli_main

        assert cli_main([]) == 2

    def test_missing_config_exit_2(self, tmp_path):
        from cbpnet.cli import cli_main

        assert cli_main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_missing_matrix_exit_2(self, tmp_path):
        from cbpnet.cli import cli_main

        assert cli_main(["report", "--matrix", str(tmp_path / "nope.csv")]) == 2

    def test_runtime_failure_exit_1(self, tmp_path):
        from cbpnet.cli import cli_main

        cfg = json.loads((open(self.config_file(tmp_path))).read())
        cfg["data"]["classes"] = 3  # cannot cover base 2 + 2 tasks
        path = tmp_path / "broken.json"
        path.write_text(json.dumps(cfg))
        assert cli_main(["run", "--config", str(path)]) == 1
