import numpy as np
import pytest

from srvit import plotting
from srvit.dataset import load_dataset, sample_seed, write_dataset
from srvit.errors import DataError
from srvit.fields import SyntheticSceneSpec
from srvit.metrics import UndefinedMetricWarning, evaluate
from srvit.report import read_csv, write_csv, write_evaluation

PNG = b"\x89PNG\r\n\x1a\n"


def _sweep_rows():
    return [(5.0, 0.9, 0.1, 0.8, 3.0), (10.0, 0.7, 0.2, 0.6, 4.0), (15.0, 0.5, np.nan, 0.4, 5.0)]


@pytest.mark.parametrize("draw", [
    lambda p: plotting.plot_threshold_sweep({"a": _sweep_rows(), "b": _sweep_rows()}, p),
    lambda p: plotting.plot_sharpness_kde({"a": np.random.default_rng(0).normal(size=20),
                                           "b": np.array([0.5, 0.5])}, p),
    lambda p: plotting.plot_loss_curves([(1, 1.0, 1.2), (2, 0.5, 0.7)], p, best_epoch=2),
    lambda p: plotting.plot_attribution(np.zeros((8, 8)), np.eye(8), (1, 0), 4, p),
    lambda p: plotting.plot_prediction(np.zeros((2, 4, 4)), np.ones((4, 4)), np.eye(4),
                                       ("A", "B"), p),
])
def test_figures_are_reproducible_png(tmp_path, draw):
    draw(tmp_path / "a.png")
    draw(tmp_path / "b.png")
    data = (tmp_path / "a.png").read_bytes()
    assert data.startswith(PNG) and data == (tmp_path / "b.png").read_bytes()


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "x.csv", ("a", "b"), [(1, 0.1), (2, np.float64(1 / 3))])
    back = read_csv(tmp_path / "x.csv")
    assert back[1] == {"a": "2", "b": repr(1 / 3)}


def test_write_evaluation(tmp_path):
    rng = np.random.default_rng(0)
    targets = rng.uniform(size=(3, 1, 8, 8))
    inputs = rng.uniform(size=(3, 4, 8, 8))
    a = evaluate(lambda x: x[:, :1], inputs, targets, patch_size=4)
    b = evaluate(lambda x: 0.5 * x[:, 1:2], inputs, targets, patch_size=4)
    result = write_evaluation(a, [0, 1, 2], tmp_path, compare=("half", b))
    assert result["welch"].t == pytest.approx(
        float(read_csv(tmp_path / "welch.csv")[0]["t"]))
    assert len(read_csv(tmp_path / "kde.csv")) == 256
    assert sorted(p.name for p in tmp_path.glob("pred_*.pgm")) == \
        ["pred_0.pgm", "pred_1.pgm", "pred_2.pgm"]


def test_degenerate_kde_leaves_empty_table(tmp_path):
    targets = np.zeros((2, 1, 4, 4))
    with pytest.warns(UndefinedMetricWarning):
        ev = evaluate(lambda x: np.zeros((len(x), 1, 4, 4)), np.zeros((2, 4, 4, 4)), targets)
    write_evaluation(ev, [0, 1], tmp_path)
    assert read_csv(tmp_path / "kde.csv") == []


# ---------------------------------------------------------------- dataset

def test_sample_seed_independent():
    assert sample_seed(0, 1) != sample_seed(0, 2) != sample_seed(1, 1)
    assert sample_seed(0, 1) == sample_seed(0, 1)


def test_dataset_split_and_rejection(tmp_path):
    spec = SyntheticSceneSpec(size=(16, 16))
    manifest = write_dataset(tmp_path, 5, spec, min_cov=0.0, max_cov=0.0)
    assert not any(r["accepted"] for r in manifest if float(r["nonzero_fraction"]) > 0)
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    ds = load_dataset(tmp_path, accepted_only=False)
    train, val = ds.split(0.2)
    assert train.sample_ids == [0, 1, 2, 3] and val.sample_ids == [4]


def test_load_dataset_missing(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")
    with pytest.raises(DataError):
        load_dataset(tmp_path)
