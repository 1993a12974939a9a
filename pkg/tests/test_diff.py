import math

import numpy as np
import pytest
import torch

from motionspace.diff import AdamState, COUNTERS, GradientMonitor, ParamStore, adam_step, backward, fd_check
from motionspace.errors import DomainError, NumericError


def test_param_store_names_and_flags():
    p = ParamStore()
    p.add("a", torch.ones(3))
    p.add("b", torch.zeros(2), trainable=False)
    with pytest.raises(DomainError):
        p.add("a", torch.ones(1))
    assert list(p) == ["a", "b"] and p.trainable() == ["a"]
    assert p["a"].requires_grad and not p["b"].requires_grad
    p.replace("a", torch.ones(5))
    assert p["a"].shape == (5,) and p["a"].requires_grad
    p.remove("b")
    assert "b" not in p


def test_bind_updates_module_in_place():
    lin = torch.nn.Linear(2, 1)
    p = ParamStore()
    p.bind("w", lin.weight)
    p.replace("w", torch.full((1, 2), 3.0))
    assert torch.equal(lin.weight.detach(), torch.full((1, 2), 3.0)) and p["w"] is lin.weight


def test_backward_simple_and_unused():
    p = ParamStore()
    x = p.add("x", torch.tensor([1.0, 2.0, 3.0]))
    p.add("unused", torch.ones(2))
    g = backward((x ** 2).sum(), p)
    assert torch.equal(g["x"], torch.tensor([2.0, 4.0, 6.0])) and torch.equal(g["unused"], torch.zeros(2))


def test_backward_rejects_nonscalar_and_nonfinite():
    p = ParamStore()
    x = p.add("x", torch.ones(2))
    with pytest.raises(DomainError):
        backward(x * 2, p)
    with pytest.raises(NumericError):
        backward((x * float("inf")).sum(), p)


def test_backward_counts_calls():
    p = ParamStore()
    x = p.add("x", torch.ones(2))
    before = COUNTERS["backward"]
    backward(x.sum(), p)
    assert COUNTERS["backward"] == before + 1


def test_adam_first_step_closed_form():
    # bias correction makes the first update lr * g / (|g| + eps) = lr * sign(g)
    p = ParamStore()
    p.add("x", torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
    st = AdamState({"x": 0.1}, eps=1e-15)
    adam_step(p, {"x": torch.tensor([3.0, -0.01, 0.0], dtype=torch.float64)}, st)
    assert torch.allclose(p["x"].detach(), torch.tensor([0.9, -1.9, 0.5], dtype=torch.float64), atol=1e-12)


def test_adam_matches_torch_optim(rng):
    init = torch.tensor(rng.normal(size=(4, 3)))
    target = torch.tensor(rng.normal(size=(4, 3)))
    p = ParamStore()
    p.add("x", init)
    st = AdamState({"x": 0.05}, eps=1e-8)
    ref = init.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=0.05, eps=1e-8)
    for _ in range(25):
        loss = ((p["x"] - target) ** 4).sum()
        adam_step(p, backward(loss, p), st)
        opt.zero_grad()
        ((ref - target) ** 4).sum().backward()
        opt.step()
    assert torch.allclose(p["x"].detach(), ref.detach(), atol=1e-10)


def test_adam_remap_moments():
    st = AdamState({"x": 0.1})
    st.m["x"] = torch.tensor([1.0, 2.0, 3.0])
    st.v["x"] = torch.tensor([4.0, 5.0, 6.0])
    st.remap("x", [2, 0, 0])
    assert st.m["x"].tolist() == [3.0, 1.0, 1.0] and st.v["x"].tolist() == [6.0, 4.0, 4.0]


def test_adam_shape_mismatch():
    p = ParamStore()
    p.add("x", torch.ones(3))
    with pytest.raises(DomainError):
        adam_step(p, {"x": torch.ones(2)}, AdamState({"x": 0.1}))


def test_gradient_monitor_flags_dead_groups():
    mon = GradientMonitor()
    mon.update({"a": torch.zeros(2), "b": torch.ones(1)})
    mon.update({"a": torch.zeros(2), "b": torch.zeros(1)})
    with pytest.warns(RuntimeWarning, match="a"):
        assert mon.check() == ["a"]


def test_fd_check_passes_on_smooth_function():
    params = {"x": torch.tensor([0.3, -0.7, 1.2], dtype=torch.float64)}
    report = fd_check(lambda: (torch.sin(params["x"]) * params["x"] ** 2).sum(), params)
    assert report.ok(1e-7) and report.checked == 3


def test_fd_check_reports_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    params = {"x": torch.tensor([1.0, 2.0], dtype=torch.float64)}
    report = fd_check(lambda: Wrong.apply(params["x"]), params)
    assert not report.ok(1e-3) and report.worst_param == "x"
    assert report.max_rel_error == pytest.approx(1 / 3, rel=1e-6)
