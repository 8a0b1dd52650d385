import csv
import io
import warnings

import numpy as np
import pytest

from facelivt.bench import BenchResult, run_bench


def test_stats_over_timed_runs_only():
    r = BenchResult("XS", "deploy", runs=3, warmup=2, batch=1, threads=1, latencies_us=[1.0, 2.0, 6.0])
    assert r.mean == 3.0 and r.median == 2.0
    assert r.std == pytest.approx(np.std([1.0, 2.0, 6.0]))


def test_invalid_counts():
    with pytest.raises(ValueError):
        BenchResult("XS", "deploy", runs=0, warmup=0, batch=1, threads=1)
    with pytest.raises(ValueError):
        BenchResult("XS", "deploy", runs=1, warmup=-1, batch=1, threads=1)


def test_run_count_contract(xs_deploy):
    r = run_bench(xs_deploy, runs=100, warmup=10)
    assert len(r.latencies_us) == 100 and r.threads == 1
    rows = list(csv.DictReader(io.StringIO(r.to_csv())))
    assert sum(row["run"].isdigit() for row in rows) == 100
    assert [row["run"] for row in rows[-3:]] == ["mean", "std", "median"]


def test_csv_shape_is_deterministic(xs_deploy):
    a = run_bench(xs_deploy, runs=3, warmup=1).to_csv().splitlines()
    b = run_bench(xs_deploy, runs=3, warmup=1).to_csv().splitlines()
    assert len(a) == len(b) and [x.split(",")[:5] for x in a] == [x.split(",")[:5] for x in b]


def test_deploy_not_slower_than_train(xs_train, xs_deploy):
    train = run_bench(xs_train, runs=15, warmup=3)
    deploy = run_bench(xs_deploy, runs=15, warmup=3)
    print(f"train mean {train.mean:.0f} us, deploy mean {deploy.mean:.0f} us")
    if deploy.mean > train.mean:
        warnings.warn(f"deploy form slower than train form on this host: {deploy.mean:.0f} > {train.mean:.0f} us")


def test_bigger_batch_takes_longer(xs_deploy):
    one = run_bench(xs_deploy, runs=10, warmup=2, batch=1)
    four = run_bench(xs_deploy, runs=10, warmup=2, batch=4)
    print(f"batch 1 {one.mean:.0f} us, batch 4 {four.mean:.0f} us")
    if not four.mean > one.mean:
        warnings.warn("batch 4 was not slower than batch 1 on this host")
