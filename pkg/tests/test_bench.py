import csv

import pytest

from dhog.bench import BENCH_FIELDS, bench_all, kernels, write_bench_csv


class TestKernels:
    def test_all_kernels_run(self):
        for fn in kernels(16, 3, 3).values():
            fn()

    def test_rows_per_size(self, tmp_path):
        rows = bench_all([{"n": 16, "c": 3, "k": 2}, {"n": 16, "c": 4, "k": 2}], repetitions=3)
        assert len(rows) == 2 * len(kernels(4, 2, 2))
        write_bench_csv(rows, tmp_path / "b.csv")
        with open(tmp_path / "b.csv") as f:
            out = list(csv.DictReader(f))
        assert list(out[0]) == BENCH_FIELDS and len(out) == len(rows)
        assert all(float(r["median_us"]) > 0 for r in out)

    def test_too_few_repetitions(self):
        with pytest.raises(ValueError):
            bench_all(repetitions=2)


class TestBudgets:
    """Loose wall-clock budgets for the per-batch kernels at training sizes."""

    def test_joint_at_batch_size(self):
        rows = bench_all([{"n": 220, "c": 10, "k": 8}], repetitions=5)
        by = {r["kernel"]: r["median_us"] for r in rows}
        assert by["joint"] < 10_000

    def test_hungarian_overcluster_size(self):
        rows = bench_all([{"n": 220, "c": 70, "k": 2}], repetitions=5)
        by = {r["kernel"]: r["median_us"] for r in rows}
        assert by["hungarian"] < 50_000
