import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctrlfuse.denoiser import DiT, DiTConfig
from ctrlfuse.numerics import Tensor
from ctrlfuse.params import ParamSet

settings.register_profile("ci", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

TINY = DiTConfig(num_blocks=3, num_heads=4, dim=16, latent_dim=16, text_dim=8, sigma_dim=8,
                 vocab_size=64, mlp_ratio=2)


@pytest.fixture
def tiny_base():
    base = DiT.create(TINY, seed=3)
    base.params.freeze()
    return base


def rng(seed=0):
    return np.random.default_rng(seed)


def float64_params(ps: ParamSet):
    out = ParamSet()
    for name, t in ps.items():
        out.add(name, Tensor(t.data.astype(np.float64), dtype=np.float64), frozen=t.frozen)
    return out


def randomize(branch_or_base, seed, scale=0.1):
    """Give every parameter (including zero projections) random values in place."""
    g = rng(seed)
    for t in branch_or_base.params.values():
        t.data = (t.data + scale * g.standard_normal(t.shape)).astype(t.data.dtype)


# --- acceptance reporting -----------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    name = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if rep.skipped:
            status = "SKIP"
        else:
            status = "PASS" if rep.passed else "FAIL"
        _CRITERIA[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _CRITERIA.items():
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
