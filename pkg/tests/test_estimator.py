import numpy as np
import pytest
from sklearn.base import clone

from cgclora import CgcLoraLM
from cgclora.data import gen_synthetic
from cgclora.exceptions import NotFittedError, TaskNotRegisteredError

TINY = dict(d_model=16, d_ff=32, r_total=12, n_common=2, d_task=4, alpha=4.0, max_steps=3, batch_size=8)


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic(0, {"train": 12, "val": 1, "test": 4})


@pytest.fixture(scope="module")
def fitted(corpus):
    return CgcLoraLM(**TINY, max_new_tokens=6).fit_from_corpus(corpus)


def test_params_round_trip():
    est = CgcLoraLM(**TINY)
    params = est.get_params()
    assert params["r_total"] == 12 and params["variant"] == "cgc_lora"
    copy = clone(est)
    assert copy.get_params() == params and not hasattr(copy, "model_")
    assert est.set_params(variant="wo_gate").variant == "wo_gate"


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CgcLoraLM().predict([(0, "abc")])


def test_predict_shape_and_determinism(fitted, corpus):
    X = [(t, s.raw_input) for t in corpus for s in corpus[t]["test"]]
    a, b = fitted.predict(X), fitted.predict(X)
    assert a.shape == (16,) and a.dtype == object
    assert list(a) == list(b) and all(isinstance(x, str) for x in a)


def test_dict_records_match_pairs(fitted):
    pairs = [(0, "abc"), (3, "hello")]
    dicts = [{"task_id": t, "text": x} for t, x in pairs]
    assert list(fitted.predict(pairs)) == list(fitted.predict(dicts))
    assert list(fitted.predict(np.array(pairs, dtype=object))) == list(fitted.predict(pairs))


def test_score_is_exact_match(fitted, corpus):
    X = [(0, s.raw_input) for s in corpus[0]["test"]]
    preds = fitted.predict(X)
    assert fitted.score(X, list(preds)) == 1.0
    assert fitted.score(X, [p + "x" for p in preds]) == 0.0


def test_training_is_seeded(corpus):
    a = CgcLoraLM(**TINY).fit_from_corpus(corpus)
    b = CgcLoraLM(**TINY).fit_from_corpus(corpus)
    assert a.train_state_.losses == b.train_state_.losses
    c = CgcLoraLM(**{**TINY, "seed": 1}).fit_from_corpus(corpus)
    assert c.train_state_.losses != a.train_state_.losses


def test_unknown_task(fitted):
    with pytest.raises(TaskNotRegisteredError):
        fitted.predict([(9, "abc")])


@pytest.mark.parametrize("X, y", [([], []), ([(0, 5)], ["x"]), ([(0, "a")], [1]), ([(0, "a"), (1, "b")], ["x"])])
def test_input_validation(X, y):
    with pytest.raises(ValueError):
        CgcLoraLM(**TINY).fit(X, y)
