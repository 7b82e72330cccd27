import numpy as np
import pytest

from scfcrc.graph import MultiRelationGraph

# acceptance verdicts, filled by tests/test_acceptance.py and echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])


def random_graph(rng: np.random.Generator, n: int, num_relations: int = 2, p: float = 0.3, d: int = 3,
                 labeled_frac: float = 0.6) -> MultiRelationGraph:
    edges = []
    for _ in range(num_relations):
        iu = np.triu_indices(n, k=1)
        keep = rng.random(iu[0].size) < p
        edges.append(np.stack([iu[0][keep], iu[1][keep]], axis=1))
    labels = rng.integers(0, 2, size=n)
    labels[rng.random(n) > labeled_frac] = -1
    return MultiRelationGraph.from_edges(rng.standard_normal((n, d)), labels, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, x, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar torch function of a float64 tensor."""

    base = x.detach().clone()
    g = np.zeros(base.numel())
    flat = base.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn(base).item()
        flat[i] = orig - step
        down = fn(base).item()
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return g.reshape(tuple(base.shape))


def grad_rel_error(fn, x, step: float = 1e-5) -> float:
    xa = x.detach().clone().requires_grad_(True)
    fn(xa).backward()
    analytic = xa.grad.numpy()
    numeric = numeric_grad(fn, x, step)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)
