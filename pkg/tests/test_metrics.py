import itertools
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import brute_fractions, brute_fss, crps_integral
from trdm import _kernels_py, kernels, metrics
from trdm.metrics import (
    LEAD_FRAMES,
    MetricTable,
    VerifyConfig,
    crps_ensemble,
    csi,
    ensemble_mean,
    fss,
    lead_time_table,
    mse_norm,
    persistence_forecast,
)

try:
    from trdm import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

BACKENDS = ["python"] + (["cython"] if _kernels_c is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    mod = _kernels_py if request.param == "python" else _kernels_c
    for name in ("crps_pixels", "box_mean", "contingency"):
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


# -- CRPS ---------------------------------------------------------------------

def test_crps_matches_exact_integral(backend):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 6))
        members = rng.gamma(0.7, 5.0, size=m)
        if rng.random() < 0.2:
            members[: m // 2] = 0.0  # ties and dry members
        y = float(rng.gamma(0.7, 5.0)) if rng.random() > 0.1 else 0.0
        got = crps_ensemble(members[:, None, None], np.array([[y]]))
        worst = max(worst, abs(got - crps_integral(members.tolist(), y)))
    assert worst <= 1e-8


def test_crps_examples(backend):
    obs = np.random.default_rng(1).gamma(1.0, 3.0, size=(5, 6))
    assert crps_ensemble(obs[None], obs) == 0.0
    assert crps_ensemble(np.array([[[0.0]], [[2.0]]]), np.array([[1.0]])) == pytest.approx(0.5, abs=1e-15)
    c, d = 3.0, -1.25
    members = np.full((4, 3, 3), c + d)
    assert crps_ensemble(members, np.full((3, 3), c)) == pytest.approx(abs(d), abs=1e-15)


def test_crps_closed_form_expression(backend):
    rng = np.random.default_rng(2)
    members = rng.normal(size=(5, 4, 4))
    obs = rng.normal(size=(4, 4))
    mae = np.abs(members - obs).mean(axis=0)
    spread = np.abs(members[:, None] - members[None, :]).sum(axis=(0, 1)) / (2 * 25)
    assert crps_ensemble(members, obs) == pytest.approx(float(np.mean(mae - spread)), abs=1e-12)


def test_crps_errors():
    with pytest.raises(ValueError):
        crps_ensemble(np.zeros((0, 2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        crps_ensemble(np.zeros((2, 2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        crps_ensemble(np.zeros((2, 2)), np.zeros((2, 2)))


# -- FSS ----------------------------------------------------------------------

def test_fss_matches_brute_force(backend):
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(100):
        f = (rng.random((8, 8)) > rng.random()).astype(float)
        o = (rng.random((8, 8)) > rng.random()).astype(float)
        window = [1, 3, 5, 7][k % 4]
        worst = max(worst, abs(fss(f, o, 0.5, window) - brute_fss(f, o, 0.5, window)))
    assert worst <= 1e-10


def test_fractions_match_brute_force(backend):
    rng = np.random.default_rng(4)
    b = (rng.random((9, 7)) > 0.5).astype(float)
    for window in (1, 3, 5, 7):
        assert np.allclose(metrics.fractions(b, 0.5, window), brute_fractions(b, window), atol=1e-12)


def test_fss_examples(backend):
    rng = np.random.default_rng(5)
    field = rng.gamma(0.5, 2.0, size=(12, 12))
    assert fss(field, field, 0.06, 9) == 1.0
    assert fss(np.zeros((12, 12)), np.ones((12, 12)), 0.06, 3) == 0.0
    assert fss(np.zeros((12, 12)), np.zeros((12, 12)), 0.06, 3) == 1.0


def test_fss_errors():
    with pytest.raises(ValueError):
        fss(np.zeros((8, 8)), np.zeros((8, 8)), 0.1, 4)
    with pytest.raises(ValueError):
        fss(np.zeros((8, 8)), np.zeros((8, 8)), 0.1, 9)
    with pytest.raises(ValueError):
        fss(np.zeros((8, 8)), np.zeros((8, 7)), 0.1, 3)


# -- CSI / contingency ----------------------------------------------------------

def test_csi_matches_direct_counts(backend):
    rng = np.random.default_rng(6)
    for _ in range(200):
        f = rng.gamma(0.5, 1.0, size=(6, 5))
        o = rng.gamma(0.5, 1.0, size=(6, 5))
        thr = float(rng.choice([0.06, 0.5, 1.0]))
        hits = misses = fa = 0
        for a, b in zip(f.ravel(), o.ravel()):
            hits += (a >= thr) and (b >= thr)
            misses += (a < thr) and (b >= thr)
            fa += (a >= thr) and (b < thr)
        assert metrics.contingency(f, o, thr) == (hits, misses, fa)
        total = hits + misses + fa
        assert csi(f, o, thr) == (1.0 if total == 0 else hits / total)


def test_csi_examples(backend):
    o = np.array([[1.0, 1.0], [1.0, 0.0]])
    f = np.array([[1.0, 1.0], [0.0, 1.0]])
    assert metrics.contingency(f, o, 0.5) == (2, 1, 1)
    assert csi(f, o, 0.5) == 0.5
    assert csi(o, o, 0.5) == 1.0
    assert csi(np.zeros((3, 3)), np.ones((3, 3)), 0.5) == 0.0
    assert csi(np.zeros((3, 3)), np.zeros((3, 3)), 0.5) == 1.0


def test_threshold_is_inclusive(backend):
    f = np.array([[0.06]])
    assert metrics.contingency(f, f, 0.06) == (1, 0, 0)


# -- normalized MSE -----------------------------------------------------------

def test_mse_norm_examples():
    rng = np.random.default_rng(7)
    a = rng.gamma(1.0, 20.0, size=(8, 8))
    b = rng.gamma(1.0, 20.0, size=(8, 8))
    assert mse_norm(a, a) == 0.0
    assert mse_norm(np.zeros((4, 4)), np.full((4, 4), 128.0)) == 1.0
    fa = [min(x / 128.0, 1.0) for x in a.ravel().tolist()]
    fb = [min(x / 128.0, 1.0) for x in b.ravel().tolist()]
    ref = sum((x - y) ** 2 for x, y in zip(fa, fb)) / len(fa)
    assert abs(mse_norm(a, b) - ref) <= 1e-12
    with pytest.raises(ValueError):
        mse_norm(a, b, max_rate=0)


# -- lead-time table ----------------------------------------------------------

def test_lead_frames_mapping():
    assert LEAD_FRAMES == {1: 5, 4: 20, 8: 40, 12: 60, 16: 80}


def test_table_perfect_forecast(backend):
    obs = np.random.default_rng(8).gamma(0.5, 4.0, size=(16, 12, 12))
    table = lead_time_table(obs[None], obs)
    assert sorted(table.rows) == [5, 20, 40, 60, 80]
    assert table.column("crps") == [0.0] * 5
    assert table.column("fss") == [1.0] * 5
    assert table.column("csi") == [1.0] * 5
    assert table.column("mse_norm") == [0.0] * 5


def test_table_uses_the_right_frames(backend):
    rng = np.random.default_rng(9)
    ens = rng.gamma(0.5, 4.0, size=(3, 16, 10, 10))
    obs = rng.gamma(0.5, 4.0, size=(16, 10, 10))
    table = lead_time_table(ens, obs, VerifyConfig(fss_window=5))
    for frame, lead in LEAD_FRAMES.items():
        mean = ens[:, frame - 1].mean(axis=0)
        row = table.rows[lead]
        assert row["crps"] == pytest.approx(crps_ensemble(ens[:, frame - 1], obs[frame - 1]), abs=1e-12)
        assert row["fss"] == pytest.approx(fss(mean, obs[frame - 1], 0.06, 5), abs=1e-12)
        assert row["csi"] == pytest.approx(csi(mean, obs[frame - 1], 0.06), abs=1e-12)
        assert row["mse_norm"] == pytest.approx(mse_norm(mean, obs[frame - 1]), abs=1e-12)


def test_table_member_permutation_invariant(backend):
    rng = np.random.default_rng(10)
    ens = rng.gamma(0.5, 4.0, size=(5, 16, 10, 10))
    obs = rng.gamma(0.5, 4.0, size=(16, 10, 10))
    ref = lead_time_table(ens, obs).to_csv()
    for perm in itertools.islice(itertools.permutations(range(5)), 1, 30, 7):
        assert lead_time_table(ens[list(perm)], obs).to_csv() == ref
        assert lead_time_table(ens[list(perm)], obs).rows == lead_time_table(ens, obs).rows


def test_table_rejects_wrong_frame_count():
    with pytest.raises(ValueError):
        lead_time_table(np.zeros((2, 15, 9, 9)), np.zeros((15, 9, 9)))
    with pytest.raises(ValueError):
        lead_time_table(np.zeros((2, 16, 9, 9)), np.zeros((16, 9, 8)))


def test_table_csv_format_and_round_trip():
    rng = np.random.default_rng(11)
    table = lead_time_table(rng.gamma(0.5, 4.0, size=(2, 16, 9, 9)), rng.gamma(0.5, 4.0, size=(16, 9, 9)))
    text = table.to_csv()
    lines = text.splitlines()
    assert lines[0] == "lead_min,crps,fss,csi,mse_norm"
    assert len(lines) == 6
    assert [int(l.split(",")[0]) for l in lines[1:]] == [5, 20, 40, 60, 80]
    for line in lines[1:]:
        assert all(len(v.split(".")[1]) == 6 for v in line.split(",")[1:])
    back = MetricTable.from_csv(text)
    for lead in back.rows:
        for c, v in back.rows[lead].items():
            assert v == pytest.approx(table.rows[lead][c], abs=5e-7)
    with pytest.raises(ValueError):
        MetricTable.from_csv("lead,crps\n5,1\n")


def test_table_value_ranges():
    rng = np.random.default_rng(12)
    table = lead_time_table(rng.gamma(0.5, 20.0, size=(4, 16, 16, 16)), rng.gamma(0.5, 20.0, size=(16, 16, 16)))
    for row in table.rows.values():
        assert row["crps"] >= 0
        assert 0 <= row["fss"] <= 1 and 0 <= row["csi"] <= 1 and 0 <= row["mse_norm"] <= 1


# -- persistence and config ----------------------------------------------------

def test_persistence_forecast():
    ctx = np.random.default_rng(13).gamma(0.5, 4.0, size=(4, 7, 9))
    p = persistence_forecast(ctx)
    assert p.shape == (16, 7, 9)
    assert all(np.array_equal(p[k], ctx[3]) for k in range(16))
    table = lead_time_table(p[None], np.repeat(ctx[3:], 16, axis=0), VerifyConfig(fss_window=3))
    assert table.column("crps") == [0.0] * 5
    with pytest.raises(ValueError):
        persistence_forecast(ctx[:3])


def test_verify_config():
    assert VerifyConfig.preset("swedish").csi_threshold == 0.06
    mrms = VerifyConfig.preset("mrms")
    assert mrms.csi_threshold == mrms.fss_threshold == 1.0
    for bad in (dict(fss_window=4), dict(fss_window=0), dict(csi_threshold=0.0), dict(max_rate=-1.0)):
        with pytest.raises(ValueError):
            VerifyConfig(**bad)


def test_ensemble_mean_is_order_independent():
    ens = np.random.default_rng(14).normal(size=(6, 5, 5))
    ref = ensemble_mean(ens)
    assert np.allclose(ref, ens.mean(axis=0), atol=1e-14)
    for perm in ([5, 4, 3, 2, 1, 0], [2, 0, 4, 1, 5, 3]):
        assert np.array_equal(ensemble_mean(ens[perm]), ref)


# -- backend selection ----------------------------------------------------------

def test_backends_agree():
    if _kernels_c is None:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(15)
    members = np.ascontiguousarray(rng.gamma(0.5, 3.0, size=(5, 400)))
    obs = rng.gamma(0.5, 3.0, size=400)
    assert np.allclose(_kernels_c.crps_pixels(members, obs), _kernels_py.crps_pixels(members, obs), atol=1e-12)
    field = (rng.random((17, 23)) > 0.4).astype(float)
    for w in (1, 3, 9, 17):
        assert np.allclose(_kernels_c.box_mean(field, w), _kernels_py.box_mean(field, w), atol=1e-12)
    f, o = rng.gamma(0.5, 1.0, size=(2, 300))
    assert _kernels_c.contingency(f, o, 0.3) == _kernels_py.contingency(f, o, 0.3)


def test_env_var_forces_python_backend():
    code = "from trdm import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"TRDM_KERNELS": "python", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


# -- properties ---------------------------------------------------------------

rates = hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6)),
                   elements=st.floats(0, 200, allow_nan=False))


@given(ens=rates, data=st.data())
def test_property_crps_nonnegative_and_zero_iff_equal(ens, data):
    obs = data.draw(hnp.arrays(np.float64, ens.shape[1:], elements=st.floats(0, 200)))
    value = crps_ensemble(ens, obs)
    assert value >= -1e-12
    if np.all(ens == obs[None]):
        assert value == 0.0
    else:
        assert value > 0.0


@given(field=hnp.arrays(np.float64, st.tuples(st.integers(3, 10), st.integers(3, 10)),
                        elements=st.floats(0, 50)),
       other=st.integers(0, 2 ** 32 - 1), thr=st.sampled_from([0.06, 1.0, 10.0]))
def test_property_binarization_invariance(field, other, thr):
    obs = np.random.default_rng(other).gamma(0.5, 5.0, size=field.shape)

    # strictly monotone map that fixes the threshold
    def warp(x):
        return np.where(x >= thr, thr + 3.0 * (x - thr) ** 2 + (x - thr), thr * (x / thr) ** 3)

    assert fss(warp(field), warp(obs), thr, 3) == pytest.approx(fss(field, obs, thr, 3), abs=1e-12)
    assert csi(warp(field), warp(obs), thr) == csi(field, obs, thr)


@given(field=hnp.arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(2, 8)), elements=st.floats(0, 300)),
       seed=st.integers(0, 2 ** 32 - 1))
def test_property_pixel_permutation_invariance(field, seed):
    rng = np.random.default_rng(seed)
    obs = rng.gamma(0.5, 5.0, size=field.shape)
    ens = rng.gamma(0.5, 5.0, size=(3,) + field.shape)
    perm = rng.permutation(field.size)
    pf = field.ravel()[perm].reshape(field.shape)
    po = obs.ravel()[perm].reshape(field.shape)
    pe = ens.reshape(3, -1)[:, perm].reshape(ens.shape)
    assert csi(pf, po, 1.0) == csi(field, obs, 1.0)
    assert mse_norm(pf, po) == pytest.approx(mse_norm(field, obs), abs=1e-15)
    assert crps_ensemble(pe, po) == pytest.approx(crps_ensemble(ens, obs), abs=1e-12)


@given(field=hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                        elements=st.floats(0, 1)),
       window=st.sampled_from([1, 3, 5, 7, 9]))
def test_property_box_mean_backends(field, window):
    ref = _kernels_py.box_mean(field, window)
    assert ref.shape == field.shape
    if _kernels_c is not None:
        assert np.allclose(_kernels_c.box_mean(field, window), ref, atol=1e-12)
