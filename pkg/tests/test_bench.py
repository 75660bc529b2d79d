import numpy as np
import pytest

from sima import bench as B
from sima.bench import BenchRecord, BenchSpec


def quick(variants, n, d, heads=8, **kw):
    kw.setdefault("repeats", 3)
    kw.setdefault("warmup", 0)
    return B.run_bench(BenchSpec(variants, n, d, heads, **kw))


def test_single_repeat_record():
    run = quick(["sima"], [16], [32], heads=4, repeats=1)
    assert len(run) == 1
    r = run[0]
    assert r.stddev_ms == 0 and r.min_ms == r.mean_ms
    assert r.exp_ops == 0


def test_records_obey_invariants():
    run = quick(["sima", "msa", "elu"], [8, 32], [16], heads=2, repeats=5)
    for r in run:
        assert r.min_ms <= r.mean_ms and r.stddev_ms >= 0
        if r.variant == "sima":
            assert r.exp_ops == 0
    assert run.metadata["precision"] == 32


def test_table3_configurations():
    top = quick(["sima", "msa", "elu", "xca"], [256], [64], repeats=1)
    assert [r.variant for r in top] == ["sima", "msa", "elu"]
    assert {r.ordering for r in top} == {"tokens_first"}
    assert any("skipped xca" in w for w in top.metadata["warnings"])
    bottom = quick(["sima", "msa", "elu", "xca"], [64], [256], repeats=1)
    assert [r.variant for r in bottom] == ["sima", "elu", "xca"]
    assert {r.ordering for r in bottom} == {"channels_first"}
    assert any("skipped msa" in w for w in bottom.metadata["warnings"])


@pytest.mark.parametrize("n,d", [(256, 64), (64, 256), (64, 64)])
def test_mul_adds_equal_under_fixed_ordering(n, d):
    run = quick(["sima", "msa", "xca", "elu"], [n], [d], repeats=1)
    assert len({r.mul_adds for r in run}) == 1


def test_free_ordering_runs_everything():
    run = quick(["sima", "msa", "xca", "elu"], [16], [64], repeats=1, fix_ordering=False)
    assert [r.variant for r in run] == ["sima", "msa", "xca", "elu"]
    assert not run.metadata["warnings"] or all("skipped" not in w for w in run.metadata["warnings"])


def test_spec_contract_errors():
    with pytest.raises(B.BenchContractError):
        BenchSpec(["sima"], [16], [30], heads=8)
    with pytest.raises(B.BenchContractError):
        BenchSpec(["sima"], [0], [32])
    with pytest.raises(B.BenchContractError):
        BenchSpec(["sima"], [16], [32], repeats=0)
    with pytest.raises(B.BenchContractError):
        BenchSpec(["sima"], [16], [32], precision=16)
    with pytest.raises(ValueError, match="supported"):
        BenchSpec(["soft"], [16], [32])


def records3():
    return [BenchRecord("sima", 64, 384, 6, "channels_first", 1.5, 1.25, 0.125, 0, 100),
            BenchRecord("msa", 256, 384, 6, "tokens_first", 2.0, 1.75, 0.0625, 393216, 200),
            BenchRecord("sima", 1024, 384, 6, "tokens_first", 12.345678, 10.0, 0.5, 0, 300)]


def test_csv_header_and_lines(tmp_path):
    path = tmp_path / "out.csv"
    B.emit_csv([], path)
    assert path.read_text() == "variant,N,D,H,ordering,mean_ms,min_ms,stddev_ms,exp_ops,mul_adds\n"
    B.emit_csv(records3(), path)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert lines[3] == "sima,1024,384,6,tokens_first,12.3457,10,0.5,0,300"


def test_csv_round_trip(tmp_path):
    path = tmp_path / "out.csv"
    run = quick(["sima", "msa"], [32], [16], heads=2)
    B.emit_csv(run, path)
    back = B.read_csv(path)
    assert len(back) == len(run)
    for a, b in zip(run, back):
        for name in ("variant", "N", "D", "H", "ordering", "exp_ops", "mul_adds"):
            assert getattr(a, name) == getattr(b, name)
        for name in ("mean_ms", "min_ms", "stddev_ms"):
            assert getattr(b, name) == pytest.approx(getattr(a, name), rel=1e-5)
    B.emit_csv(back, path)
    assert B.read_csv(path) == back


def test_csv_io_error(tmp_path):
    with pytest.raises(OSError):
        B.emit_csv([], tmp_path / "missing" / "x.csv")


def test_plotdata_series(tmp_path):
    path = tmp_path / "plot.dat"
    recs = [BenchRecord("sima", n, 384, 6, "x", float(i + 1), 0.0, 0.0, 0, 0) for i, n in enumerate((64, 256, 1024))]
    B.emit_plotdata(recs, path)
    assert path.read_text() == "# variant=sima D=384 H=6\n64 1\n256 2\n1024 3\n"
    B.emit_plotdata(records3(), path)
    blocks = path.read_text().strip().split("\n\n")
    assert [b.splitlines()[0] for b in blocks] == ["# variant=sima D=384 H=6", "# variant=msa D=384 H=6"]
    assert blocks[0].splitlines()[1:] == ["64 1.5", "1024 12.3457"]


def test_plotdata_d_sweep_and_mixed_heads(tmp_path):
    recs = [BenchRecord("xca", 64, d, 8, "x", 1.0, 1.0, 0.0, 0, 0) for d in (128, 256)]
    path = tmp_path / "plot.dat"
    B.emit_plotdata(recs, path)
    assert path.read_text().splitlines()[0] == "# variant=xca N=64 H=8"
    recs[1].H = 4
    with pytest.raises(B.BenchContractError):
        B.emit_plotdata(recs, path)


def test_summary_and_speedup():
    recs = records3()
    table = B.summary_table(recs)
    assert len(table.splitlines()) == 4
    recs[1].N = 64
    assert B.speedup(recs, "msa") == {(64, 384): pytest.approx(2.0 / 1.5)}


def test_timing_excludes_setup_and_uses_identical_weights():
    # same seed, same shape: exact same counters regardless of repeats
    a = quick(["sima", "elu"], [32], [16], heads=2, repeats=1)
    b = quick(["sima", "elu"], [32], [16], heads=2, repeats=4)
    assert [(r.exp_ops, r.mul_adds) for r in a] == [(r.exp_ops, r.mul_adds) for r in b]


def test_precision_64_and_backend_metadata():
    run = quick(["sima"], [8], [8], heads=2, precision=64, backend="python")
    assert run.metadata["backend"] == "python" and run.metadata["precision"] == 64
    assert np.isfinite(run[0].mean_ms)
