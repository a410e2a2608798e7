"""Smoke test for the flakelab Python extension.

Build and install it first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/flakelab-*.whl

then run `python python/smoke_test.py`.
"""

import os
import tempfile

import flakelab


def check_rerun_counts():
    assert flakelab.statistical_reruns(flakelab.RateTriple(0.9, 0.1), 0.95) == 29
    assert flakelab.statistical_reruns(flakelab.RateTriple(0.5, 0.5), 0.95) == 6
    assert flakelab.statistical_reruns(flakelab.RateTriple(1.0, 0.0), 0.95) is None
    assert flakelab.failure_confirmation_reruns(0.5, 0.95) == 5
    rates = flakelab.RateTriple(0.5, 0.25, 0.25)
    assert abs(flakelab.unveil_probability(rates, 2) - 0.25) < 1e-12
    simulated = flakelab.monte_carlo_unveil(rates, 2, trials=200_000, seed=1)
    assert abs(simulated - 0.25) < 0.01, simulated
    observed = flakelab.RateTriple.from_verdicts(["PASS", "FAIL", "SKIP", "ABSENT"])
    assert abs(observed.p_pass - 1 / 3) < 1e-12
    assert flakelab.n_once(["PASS", "SKIP", "ERROR"]) == 3
    assert flakelab.n_once(["PASS", "PASS"]) is None


def check_test_ids():
    tid = flakelab.TestId.parse("tests/test_a.py::TestX::test_sort[3]")
    assert (tid.suite_path, tid.class_name, tid.test_name, tid.parametrization) == (
        "tests/test_a.py",
        "TestX",
        "test_sort",
        "[3]",
    )
    assert tid == flakelab.TestId("tests/test_a.py", "TestX", "test_sort", "[3]")
    assert str(flakelab.TestId("t.py", "", "test_x")) == "t.py::test_x"
    try:
        flakelab.TestId.parse("no separator")
    except ValueError:
        pass
    else:
        raise AssertionError("bad id accepted")


def check_junit_and_archive():
    xml = b"""<testsuite>
      <testcase file="t.py" name="test_ok" time="0.1"/>
      <testcase file="t.py" classname="C" name="test_p[1]" time="0.2"><failure/></testcase>
      <testcase file="t.py" name="test_s" time="0"><skipped/></testcase>
    </testsuite>"""
    rows = flakelab.parse_junit_report(xml)
    assert [(str(t), v) for t, v, _ in rows] == [
        ("t.py::test_ok", "PASS"),
        ("t.py::C::test_p[1]", "FAIL"),
        ("t.py::test_s", "SKIP"),
    ]
    assert flakelab.classify_od_kind(["PASS", "PASS"]) == "Victim"
    assert flakelab.classify_od_kind(["FAIL", "ERROR"]) == "Brittle"
    assert flakelab.classify_od_kind([]) == "Undetermined"

    header = "run_index,iteration_id,order_mode,order_seed,machine_fingerprint,test_id,verdict,duration_s\n"
    lines = []
    flips = ["PASS", "FAIL", "PASS", "PASS"]
    for run in range(4):
        mode, seed = ("same", "") if run < 2 else ("shuffled", str(run))
        lines.append(f"{run},{run // 2 if run < 2 else 1},{mode},{seed},abcd,t.py::test_flip,{flips[run]},0.1\n")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "archive.csv")
        with open(path, "w") as f:
            f.write(header + "".join(lines))
        matrix = flakelab.VerdictMatrix.load(path)
        assert len(matrix) == 1
        assert matrix.run_count() == 4 and matrix.run_count("shuffled") == 2
        test = matrix.tests()[0]
        assert matrix.sequence(test) == flips
        assert matrix.classify() == [(test, "NonOrderDependent", None)]
        [(_, once, at)] = matrix.estimates([0.95])
        assert once == 2 and at == [11], (once, at)
        copy = os.path.join(tmp, "copy.csv")
        matrix.save(copy)
        assert open(copy).read() == open(path).read()


if __name__ == "__main__":
    check_rerun_counts()
    check_test_ids()
    check_junit_and_archive()
    print("flakelab python smoke test: ok")
