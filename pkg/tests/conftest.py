import numpy as np
import pytest
import torch

from r2l.data import PlaceData
from r2l.worldgen import DatasetConfig, TrajConfig, build_dataset


def central_difference(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = torch.zeros_like(x)
    flat, gf = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f())
            flat[i] = orig - eps
            lo = float(f())
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, 1e-6))
    return float(((a - b).abs() / scale).max())


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Short two-loop trajectory: 50 places per loop, 8 probes."""
    cfg = DatasetConfig(traj=TrajConfig(loop_length=100.0), probe_count=8)
    out = tmp_path_factory.mktemp("tiny")
    manifest = build_dataset(cfg, out)
    return manifest


@pytest.fixture(scope="session")
def tiny_data(tiny_dataset):
    return PlaceData.from_manifest(tiny_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance-criterion reporting: one line per criterion in the terminal summary
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def detail(request):
    """Sets the free-text detail shown next to a criterion's pass/fail line."""
    def set_detail(text: str) -> None:
        request.node.criterion_detail = text
    return set_detail


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    number, title = marker.args
    status = "PASS" if rep.passed else ("FAIL" if rep.when == "call" else "ERROR")
    ACCEPTANCE[number] = (title, status, getattr(item, "criterion_detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title}" + (f" ({text})" if text else ""))
