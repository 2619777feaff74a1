import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tcpl import TCPLClassifier
from tcpl.exceptions import ShapeError
from tcpl.validation import check_images, dataset_from_arrays

from .conftest import tiny_config


@pytest.fixture
def arrays(pair):
    source, target = pair
    names = np.array(["cat", "dog", "emu"])
    return source.images(), names[source.labels()], target.images()


def _small(**kw):
    return TCPLClassifier(config=tiny_config().to_dict(), epochs=2, epoch_update_proto=1, **kw)


class TestParams:
    def test_get_set_params_and_clone(self):
        est = TCPLClassifier(epochs=5, M=2)
        assert est.get_params()["epochs"] == 5
        est.set_params(lr0=0.1)
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert twin is not est

    def test_params_override_config(self):
        est = TCPLClassifier(config={"epochs": 9, "epoch_update_proto": 3, "M": 4}, M=2, batch_size=5)
        cfg = est._resolve_config()
        assert (cfg.epochs, cfg.M, cfg.batch_size.source, cfg.batch_size.target_pl) == (9, 2, 5, 5)


class TestFitted:
    def test_not_fitted(self, arrays):
        with pytest.raises(NotFittedError):
            TCPLClassifier().predict(arrays[0])

    def test_fit_predict(self, arrays):
        X, y, Xt = arrays
        est = _small().fit(X, y, X_target=Xt)
        assert list(est.classes_) == ["cat", "dog", "emu"]
        pred = est.predict(Xt)
        assert set(pred) <= set(est.classes_)
        proba = est.predict_proba(X)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(est.classes_[proba.argmax(axis=1)], est.predict(X))
        assert est.transform(X).shape == (len(X), 6)
        assert 0.0 <= est.score(X, y) <= 1.0

    def test_logits_are_similarities_times_head(self, arrays):
        X, y, _ = arrays
        est = _small().fit(X, y)
        W = est.model_.head.detach().numpy()
        np.testing.assert_allclose(est.decision_function(X), est.transform(X) @ W.T, rtol=1e-5, atol=1e-6)

    def test_explain(self, arrays):
        X, y, _ = arrays
        est = _small().fit(X, y)
        traces = est.explain(X[:3])
        assert len(traces) == 3
        for t, logit in zip(traces, est.decision_function(X[:3])):
            np.testing.assert_allclose(t.logits, logit, atol=1e-6)
            assert t.class_names == ["cat", "dog", "emu"]

    def test_uint8_input(self, arrays):
        X, y, _ = arrays
        est = _small().fit(X, y)
        X8 = np.round(X * 255).astype(np.uint8)
        assert est.predict(X8).shape == (len(X),)

    def test_wrong_image_size(self, arrays):
        X, y, _ = arrays
        est = _small().fit(X, y)
        with pytest.raises(ValueError):
            est.predict(np.zeros((1, 40, 40, 3)))

    def test_single_class(self, arrays):
        X, _, _ = arrays
        with pytest.raises(ValueError):
            _small().fit(X, np.zeros(len(X)))

    def test_from_checkpoint(self, arrays, tmp_path):
        X, y, Xt = arrays
        est = _small(out_dir=str(tmp_path)).fit(X, y, X_target=Xt)
        again = TCPLClassifier.from_checkpoint(tmp_path / "final.pt")
        np.testing.assert_array_equal(again.decision_function(X), est.decision_function(X))
        np.testing.assert_array_equal(again.predict(X), est.predict(X))


class TestValidation:
    @pytest.mark.parametrize("bad", [np.zeros((2, 8, 8)), np.zeros((2, 8, 8, 4)), np.zeros((0, 8, 8, 3)),
                                     np.full((1, 8, 8, 3), np.nan), np.full((1, 8, 8, 3), 2.0),
                                     np.zeros((1, 8, 6, 3))])
    def test_rejects(self, bad):
        with pytest.raises(ShapeError):
            check_images(bad)

    def test_single_image_gains_axis(self):
        assert check_images(np.zeros((8, 8, 3))).shape == (1, 8, 8, 3)

    def test_target_labels_are_evaluation_only(self):
        ds = dataset_from_arrays(np.zeros((2, 8, 8, 3)), [0, 1], ["a", "b"], "target")
        assert all(s.label is None for s in ds) and list(ds.eval_labels()) == [0, 1]
