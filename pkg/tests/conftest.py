import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_grid(rng, nx=16, ny=16, density=0.2, channels=3, cell_size=0.5, x_min=0.0, y_min=0.0):
    """Random sparse grid with nonzero features (handy for dense round trips)."""
    from radarsparse.grid import GridSpec, SparseGrid

    spec = GridSpec(x_min, x_min + nx * cell_size, y_min, y_min + ny * cell_size, cell_size)
    mask = rng.random((nx, ny)) < density
    cells = np.argwhere(mask)
    feats = rng.normal(size=(len(cells), channels))
    feats[feats == 0] = 1.0
    return SparseGrid(spec, cells, feats)


def random_cloud(rng, n=60, extent=8.0):
    """Points in [-extent, extent)^2 with random vr and rcs."""
    from radarsparse.points import PointCloud

    xy = rng.uniform(-extent, extent, size=(n, 2))
    return PointCloud.from_xy(xy, rng.normal(0, 5, n), rng.normal(5, 8, n))


def bn_train(f, bn):
    """Textbook batch normalization with biased batch variance."""
    mean, var = f.mean(axis=0), f.var(axis=0)
    return (f - mean) / np.sqrt(var + bn.eps) * bn.gamma.value + bn.beta.value


def checked_grads(closure, params, tolerance, h=1e-5, max_coords=48, floor=1e-8):
    """grad_check, skipping parameters whose exact gradient is identically zero.

    Biases and BN shifts that feed a train-mode BN are removed by the
    normalization; their finite differences are pure rounding noise, which a
    relative error cannot judge. Any other zero gradient would be a bug.
    """
    from radarsparse.nn import grad_check

    params = dict(params)
    for p in params.values():
        p.zero_grad()
    closure()
    dead = [n for n, p in params.items() if p.grad.size and np.abs(p.grad).max() < 1e-12]
    assert all(n.endswith(("bias", "beta")) for n in dead), dead
    report = grad_check(closure, params, tolerance=tolerance, h=h, max_coords=max_coords, floor=floor)
    for n in dead:
        report.errors.pop(n)
    return report


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, title, ok, detail)`` records a verdict for the summary.

    A test that dies before recording shows up as FAIL.
    """
    seen = []

    def record(n, title, ok, detail=""):
        seen.append(n)
        request.config._criteria[n] = (title, bool(ok), detail)
        return ok

    yield record
    if not seen:
        n = request.node.get_closest_marker("criterion").args[0]
        request.config._criteria[n] = (request.node.name, False, "did not finish")


def pytest_terminal_summary(terminalreporter, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        title, ok, detail = crit[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
