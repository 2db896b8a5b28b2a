import numpy as np
import pytest

from mpqdm2 import numkit


def grid_search_uniform(x, bits, n_steps=400, n_offsets=64):
    """Dense (step, offset) grid search for the MSE-optimal uniform quantizer.

    Independent of the package: rounds with ``floor(v + 0.5)`` and clips by hand.
    Returns (mse, step, offset).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    qmax = 2**bits - 1
    span = x.max() - x.min()
    best = (np.inf, None, None)
    steps = np.geomspace(span / qmax / 64, span / qmax * 1.1, n_steps)
    for s in steps:
        # offsets that place the grid anywhere over one step around the mid-range fit
        centre = qmax / 2 - (x.max() + x.min()) / (2 * s)
        offs = centre + np.linspace(-0.5, 0.5, n_offsets)
        k = np.clip(np.floor(x[None, :] / s + offs[:, None] + 0.5), 0, qmax)
        q = s * (k - offs[:, None])
        err = np.mean((q - x[None, :]) ** 2, axis=1)
        i = int(np.argmin(err))
        if err[i] < best[0]:
            best = (float(err[i]), float(s), float(offs[i]))
    return best


def grid_search_residual(x, base_bits, n_steps=400, n_offsets=64):
    """Same grid over the base quantizer plus the closed-form optimal binary step."""
    x = np.asarray(x, dtype=np.float64).ravel()
    qmax = 2**base_bits - 1
    span = x.max() - x.min()
    best = np.inf
    for s in np.geomspace(span / qmax / 64, span / qmax * 1.1, n_steps):
        centre = qmax / 2 - (x.max() + x.min()) / (2 * s)
        offs = centre + np.linspace(-0.5, 0.5, n_offsets)
        k = np.clip(np.floor(x[None, :] / s + offs[:, None] + 0.5), 0, qmax)
        r = x[None, :] - s * (k - offs[:, None])
        d = np.mean(np.abs(r), axis=1, keepdims=True)
        sg = np.where(r >= 0, 1.0, -1.0)
        best = min(best, float(np.min(np.mean((r - d * sg) ** 2, axis=1))))
    return best


def heavy_tailed_channel(rng, n=1000, sigma=1.0, frac=0.01):
    x = rng.normal(0.0, sigma, n)
    k = max(1, int(round(frac * n)))
    idx = rng.choice(n, k, replace=False)
    x[idx] = 10 * sigma * np.where(rng.uniform(size=k) < 0.5, -1.0, 1.0)
    return x


def _candidate_offsets(s, lo, hi, qmax):
    c = qmax / 2 - (lo + hi) / (2 * s)
    return np.array([c - 0.25, c, c + 0.25, np.floor(c + 0.5)])


def step_search_oracle(x, bits, tiers=0, n_steps=3000):
    """Dense 1-D grid over the step; each step keeps its best offset from the
    centred / quarter-shifted / integer family.  Binary steps (``tiers=1``)
    take their closed-form optimum.  Returns the best MSE.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    qmax = 2**bits - 1
    lo, hi = x.min(), x.max()
    best = np.inf
    for s in np.geomspace((hi - lo) / qmax / 256, (hi - lo) / qmax * 1.05, n_steps):
        offs = _candidate_offsets(s, lo, hi, qmax)
        k = np.clip(np.floor(x[None, :] / s + offs[:, None] + 0.5), 0, qmax)
        r = x[None, :] - s * (k - offs[:, None])
        if tiers:
            d = np.mean(np.abs(r), axis=1, keepdims=True)
            r = r - d * np.where(r >= 0, 1.0, -1.0)
        best = min(best, float(np.min(np.mean(r * r, axis=1))))
    return best


@pytest.fixture
def rng():
    return numkit.make_rng(1234)


@pytest.fixture(scope="session")
def teacher():
    """The shared full-precision toy teacher (two-moons, seed 0)."""
    from mpqdm2.toydiff.model import pretrain_fp

    return pretrain_fp("two-moons", 0)


@pytest.fixture(scope="session")
def searched(teacher):
    """Searched mixed-precision quantization of the teacher, adapters left at zero product."""
    from mpqdm2.pipeline import QuantSettings, quantize_model

    return quantize_model(teacher.model, QuantSettings(), 0, search=True, oolri=False)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def record_criterion(request):
    """Store one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, ok, detail, seconds, limit=None):
        budget = "" if limit is None else f" (limit {limit:.0f}s)"
        lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s{budget}]"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
