import numpy as np
import pytest

from fedcausal import evaluation
from fedcausal.errors import IoError, MissingTruth, ShapeMismatch


def test_pehe_perfect_and_offset():
    t = np.array([1.0, -2.0, 3.5])
    assert evaluation.pehe(t, t) == (0.0, 0.0)
    assert evaluation.pehe(t, t + 1.0)[1] == pytest.approx(1.0)


def test_pehe_offset_closed_form():
    rng = np.random.default_rng(0)
    t = rng.normal(size=50)
    for c in (-2.0, 0.3, 7.0):
        eps, _ = evaluation.pehe(t, t + c)
        assert eps == pytest.approx(c * c, rel=1e-12)


def test_pehe_permutation_invariant_and_grouped():
    rng = np.random.default_rng(1)
    t, e = rng.normal(size=12), rng.normal(size=12)
    perm = rng.permutation(12)
    assert evaluation.pehe(t, e)[0] == pytest.approx(evaluation.pehe(t[perm], e[perm])[0], rel=1e-14)
    grouped = evaluation.pehe([t[:5], t[5:]], [e[:5], e[5:]])
    assert grouped[0] == pytest.approx(evaluation.pehe(t, e)[0], rel=1e-14)


def test_pehe_errors():
    with pytest.raises(ShapeMismatch):
        evaluation.pehe(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        evaluation.pehe([np.zeros(2), np.zeros(2)], [np.zeros(3), np.zeros(1)])
    with pytest.raises(MissingTruth):
        evaluation.pehe(None, np.zeros(2))


def test_ate_error_examples():
    assert evaluation.ate_error(1.0, 1.0) == 0.0
    assert evaluation.ate_error(2.0, 1.5) == 0.5


def test_true_ate_is_mean_ite():
    t = [np.array([1.0, 2.0]), np.array([6.0])]
    m = evaluation.split_metrics(t, [1.0, 2.0, 6.0], 3.0)
    assert m.ate_error == 0.0 and m.sqrt_pehe == 0.0 and m.n_units == 3


def _report(seed):
    return evaluation.MetricsReport(
        seed, "data1", 5, "abc", {"test": evaluation.SplitMetrics(1.5, 0.2, 10)}, "test", 1.25
    )


def test_report_round_trip(tmp_path):
    r = _report(0)
    back = evaluation.load_report(evaluation.emit_report(r, tmp_path / "m.json"))
    assert back == r and back.sqrt_pehe == 1.5


def test_csv_header_written_once(tmp_path):
    csv_path = tmp_path / "all.csv"
    evaluation.emit_report(_report(0), tmp_path / "a.json", csv_path)
    evaluation.emit_report(_report(1), tmp_path / "b.json", csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == ",".join(evaluation.CSV_COLUMNS) and len(lines) == 3


def test_missing_directory_names_path(tmp_path):
    target = tmp_path / "nope" / "m.json"
    with pytest.raises(IoError, match="nope"):
        evaluation.emit_report(_report(0), target)


def test_aggregate_mean_and_standard_error():
    mean, se = evaluation.aggregate([1.0, 2.0, 3.0])
    assert mean == 2.0 and se == pytest.approx(1.0 / np.sqrt(3))
