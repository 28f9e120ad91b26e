import numpy as np
import pytest

from dadu import gradcheck
from dadu import tensor as T


@pytest.mark.parametrize("name", [n for n in gradcheck.CHECKS if n != "model"])
def test_op_gradients(name):
    r = gradcheck.run_check(name, seed=0)
    assert r.passed, f"{name}: {r.max_rel_error:.3e} at {r.worst}"
    assert r.skipped == 0
    assert r.coords > 0


@pytest.mark.parametrize("seed", [0, 1])
def test_model_gradients(seed):
    r = gradcheck.run_check("model", seed=seed)
    assert r.passed, f"{r.max_rel_error:.3e} at {r.worst}"


def test_seeded_run_reproducible():
    a = gradcheck.run_check("dab", seed=4)
    b = gradcheck.run_check("dab", seed=4)
    assert a.max_rel_error == b.max_rel_error and a.worst == b.worst


def test_corrupted_backward_is_reported(monkeypatch):
    original = T.relu

    def bad_relu(x):
        out = T.Tensor(np.maximum(x.data, 0))
        # wrong rule: passes the gradient everywhere
        return T._record("relu", (x,), out, lambda g: (g,))

    monkeypatch.setattr(T, "relu", bad_relu)
    r = gradcheck.run_check("relu", seed=0)
    assert not r.passed and r.name == "relu"
    monkeypatch.setattr(T, "relu", original)
    assert gradcheck.run_check("relu", seed=0).passed


def test_kink_crossing_is_skipped():
    x = T.Tensor(np.array([[[[1e-5, 1.0]]]]), requires_grad=True)
    r = gradcheck.gradient_check(lambda: T.sum_all(T.relu(x)), [x], "kink")
    assert r.skipped == 1 and r.coords == 1 and r.passed


def test_unknown_check():
    with pytest.raises(KeyError):
        gradcheck.run_check("nope")
