import numpy as np
import pytest

from fdmc_alloc.channel import (
    CellGeometry,
    ChannelGains,
    LargeScaleParams,
    dbm_to_watt,
    sample_channel_realization,
    trial_rng,
)
from fdmc_alloc.model import ProblemInstance

PARAMS = LargeScaleParams()
GEOMETRY = CellGeometry()


def drop(seed, trial, n_f, k, j, p_dl_dbm=31.0, p_ul_dbm=18.0):
    """A realistic noise-normalized instance from the channel generator."""
    gains = sample_channel_realization(GEOMETRY, PARAMS, n_f, k, j, trial_rng(seed, trial))
    return ProblemInstance.create(gains, dbm_to_watt(p_dl_dbm), dbm_to_watt(p_ul_dbm),
                                  PARAMS.rho, noise_dl_w=PARAMS.noise_dl_w)


def toy_instance(H, G, F, LSI, p_dl=1.0, p_ul=1.0, rho=1.0, w=None, mu=None):
    """Instance from explicit gain arrays (F indexed (i, r, m))."""
    gains = ChannelGains(np.asarray(H, float), np.asarray(G, float), np.asarray(F, float),
                         np.asarray(LSI, float))
    return ProblemInstance.create(gains, p_dl, p_ul, rho, w=w, mu=mu)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_lifted(inst, rng):
    """Random LiftedPoint inside the box bounds (big-M rows not enforced)."""
    from fdmc_alloc.reform import LiftedPoint

    n, k, j = inst.shape
    s = rng.uniform(0.0, 1.0, (n, k, j)) * inst.slot_mask
    p_raw = rng.uniform(0.0, 1.0, (n, k)) * inst.p_max_dl / n
    q_raw = rng.uniform(0.0, 1.0, (n, j)) * inst.p_max_ul[None, :] / n
    pt = s * p_raw[:, :, None] * rng.uniform(0.5, 1.0, (n, k, j))
    qt = s * q_raw[:, None, :] * rng.uniform(0.5, 1.0, (n, k, j))
    return LiftedPoint(pt, qt, s, p_raw, q_raw)


def central_fd(fun, x, idx, rel_step=1e-5):
    """Central differences of scalar ``fun`` over coordinates ``idx``."""
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        h = rel_step * max(abs(x[i]), 1e-300)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[n] = (fun(xp) - fun(xm)) / (xp[i] - xm[i])
    return out


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
