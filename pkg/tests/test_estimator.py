import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from s2rm.errors import ConfigError, DimensionError, InputError
from s2rm.estimator import SpatialForecaster, check_dataset, check_views
from s2rm.worldsim import DatasetSpec, generate_dataset, load_dataset

SMALL = dict(n_modules=2, hidden=6, embed_dim=8, input_heads=1, input_key=4, input_value=4, ic_heads=1,
             ic_key=4, ic_value=4, enc_width=8, codec_hidden=16, gate_hidden=4, epochs=2, batch_size=2)


@pytest.fixture(scope="module")
def data_path(tmp_path_factory):
    return generate_dataset(DatasetSpec(n_seq=5, T=4, A=3, seed=3), tmp_path_factory.mktemp("est") / "d.bin")


@pytest.fixture(scope="module")
def fitted(data_path, tmp_path_factory):
    return SpatialForecaster(**SMALL).fit(data_path, out_dir=tmp_path_factory.mktemp("fit"))


def test_params_round_trip():
    est = SpatialForecaster(**SMALL)
    params = est.get_params()
    assert params["n_modules"] == 2 and params["embed_init"] == "positions"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(hidden=9, lr=0.01)
    assert est.hidden == 9 and est.train_config().lr == 0.01
    assert "tto_hidden" not in est.model_params()
    assert "tto_hidden" in SpatialForecaster(kind="tto").model_params()


def test_unfitted_and_bad_kind(data_path):
    with pytest.raises(NotFittedError):
        SpatialForecaster().predict_proba(data_path)
    with pytest.raises(ConfigError):
        SpatialForecaster(kind="mlp", epochs=1).fit(data_path)


def test_fit_predict_score(fitted, data_path):
    assert len(fitted.history_) == 2
    proba = fitted.predict_proba(data_path)
    assert proba.shape == (5, 3, 3, 121)
    assert np.all((proba >= 0) & (proba <= 1))
    assert set(np.unique(fitted.predict(data_path))) <= {0, 1}
    assert 0 <= fitted.score(data_path) <= 1


def test_from_checkpoint(fitted, data_path, tmp_path):
    again = SpatialForecaster.from_checkpoint(fitted.checkpoint_)
    assert again.hidden == 6 and again.lr == fitted.lr
    assert np.array_equal(again.predict_proba(data_path), fitted.predict_proba(data_path))


def test_explicit_validation_and_tiny_data(data_path, tmp_path):
    ds = load_dataset(data_path)
    est = SpatialForecaster(**{**SMALL, "epochs": 1}).fit(ds, validation=ds)
    assert len(est.history_) == 1
    one = generate_dataset(DatasetSpec(n_seq=1, T=3, A=2), tmp_path / "one.bin")
    with pytest.raises(InputError):
        SpatialForecaster(**SMALL).fit(one)
    with pytest.raises(TypeError):
        check_dataset(42)


def test_check_views():
    centers = np.array([[5, 5], [42, 20]])
    crops = np.zeros((2, 11, 11))
    assert check_views(centers, crops)[0].shape == (2, 2)
    with pytest.raises(DimensionError):
        check_views(centers, np.zeros((3, 11, 11)))
    with pytest.raises(DimensionError):
        check_views(np.zeros((2, 3)), crops)
    with pytest.raises(InputError):
        check_views(np.array([[4, 5], [6, 6]]), crops)
    with pytest.raises(InputError):
        check_views(centers, np.full((2, 11, 11), 2.0))
