import numpy as np

from ria import diffcore as dc


def autodiff_vs_fd(build, params, eps=1e-5):
    """Return (autodiff, finite-difference) gradients of the scalar ``build(params)``."""
    with dc.Tape() as tape:
        out = build(params)
    dc.grad(out, params, tape)
    auto = {k: params.grad(k).copy() for k in params}
    fd = dc.finite_diff(lambda p: build(p).item(), params, eps)
    return auto, fd


def assert_grads_close(auto, fd, rtol=1e-4, atol=1e-6):
    for k in auto:
        a, f = auto[k], fd[k]
        err = np.abs(a - f)
        ok = (err <= atol) | (err <= rtol * np.maximum(np.abs(a), np.abs(f)))
        assert ok.all(), f"{k}: max abs err {err.max():.3g}"


def jitter(params, rng, scale=0.1):
    """Move zero-initialized biases off the ReLU kinks before finite differencing."""
    for _, t in params.items():
        t.value = t.value + scale * rng.normal(size=t.shape)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
