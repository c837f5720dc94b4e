import numpy as np

from gnpm import gradcheck as G
from gnpm import tensor as T
from gnpm.tensor import Tensor


def test_all_cases_pass_at_small_scale():
    results = G.run_suite(instances=3, seed=7)
    assert {r.name for r in results} == set(G.ALL_CASES)
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed(1e-5)]
    assert not bad


def test_detects_a_wrong_vjp():
    def build(rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)
        # deliberately wrong derivative for sin
        wrong = lambda: Tensor._from_op(np.sin(x.values), (x,), lambda g: (g * np.sin(x.values),)).sum()
        return wrong, [x]

    res = G.run_case("broken_sin", build, instances=5)
    assert not res.passed(1e-5) and res.max_rel_error > 1e-2


def test_redraws_on_branch_switch():
    # |x| around a kink: instances within h of zero must be redrawn, not scored
    def build(rng):
        x = Tensor(np.array([rng.choice([0.0, 1.0])]), requires_grad=True, dtype=np.float64)
        return (lambda: T.abs(x).sum()), [x]

    res = G.run_case("kink", build, instances=20, seed=3)
    assert res.redraws > 0 and res.passed(1e-5)


def test_case_seeding_is_stable():
    a = G.run_case("square", G.ALL_CASES["square"], instances=3, seed=1)
    b = G.run_case("square", G.ALL_CASES["square"], instances=3, seed=1)
    assert a.max_rel_error == b.max_rel_error
