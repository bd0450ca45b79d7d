import numpy as np
import pytest
from scipy import integrate, stats

from insample.geometry import periodic_phase, shape
from insample.models import SimModel, normalize_model
from insample.study import rejection_sample, run_study, sample_model

COMPONENTS = ("f1", "f2", "f3", "joint", "local-linear-joint")


def _ones(u):
    return np.ones_like(np.asarray(u, dtype=float))


UNIFORM = SimModel("uniform", 2.0, 2.0, shape("triangle"), _ones, _ones, _ones)


@pytest.mark.parametrize("name", ["model1", "model2"])
def test_models_are_densities(name):
    m = normalize_model(name)
    mass, _ = integrate.dblquad(lambda y, x: float(m.density(x, y)), 0, 1, 0, lambda x: 1 - x,
                                epsabs=1e-12, epsrel=1e-11)
    assert abs(mass - 1.0) < 1e-8


def test_model1_constant():
    # calendar time t = x + y has density 2t on the triangle, so the mass is
    # int_0^1 t (sin(4 pi t) + 3/2) dt = 3/4 - 1/(4 pi)
    m = normalize_model("model1")
    assert m.c == pytest.approx(1 / (0.75 - 1 / (4 * np.pi)), rel=1e-10)
    assert m.c == pytest.approx(1.4915966536893, rel=1e-12)


def test_uniform_acceptance_rate():
    pts, rate = rejection_sample(UNIFORM, 100_000, 3)
    assert 0.985 <= rate <= 0.995
    assert len(pts) == 100_000


@pytest.mark.parametrize("name", ["model1", "model2"])
def test_samples_lie_in_triangle(name):
    s = sample_model(normalize_model(name), 20_000, 5)
    assert np.all(s.points >= 0) and np.all(s.points <= 1)
    assert np.all(s.x + s.y <= 1.0)


def test_sampler_is_deterministic():
    m = normalize_model("model1")
    a = sample_model(m, 500, 42)
    b = sample_model(m, 500, 42)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, sample_model(m, 500, 43).points)


def test_model1_phase_histogram():
    m = normalize_model("model1")
    s = sample_model(m, 100_000, 7)
    z = periodic_phase(s.x + s.y, 2.0)
    edges = np.linspace(0, 1, 21)
    obs, _ = np.histogram(z, edges)
    # uniform triangle phases have density z + 1/2 for J = 2
    dens = lambda t: (t + 0.5) * (np.sin(2 * np.pi * t) + 1.5)
    p = np.array([integrate.quad(dens, a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
    p /= p.sum()
    _, pval = stats.chisquare(obs, p * obs.sum())
    assert pval > 0.001


def test_low_acceptance_raises():
    def spike(z):
        z = np.asarray(z, dtype=float)
        return np.where(z < 1e-3, 1e5, 1.0)

    bad = SimModel("spike", 1.0, 2.0, shape("triangle"), _ones, _ones, spike)
    with pytest.raises(ValueError, match="below 1%"):
        rejection_sample(bad, 1000, 0)


@pytest.fixture(scope="module")
def small_study():
    return run_study("model1", n=200, bandwidth_grid=[0.08, 0.1], reps=6, seed=3,
                     ll_bandwidths=[0.09], threads=3)


def test_study_identity(small_study):
    assert small_study.max_identity_error() < 1e-10
    for r in small_study.rows:
        assert r.reps_used == 6
        assert r.iv >= -1e-15 and r.isb >= 0


def test_study_rows_cover_components(small_study):
    assert small_study.bandwidths("f1") == [0.08, 0.1]
    assert {r.component for r in small_study.rows} == set(COMPONENTS)
    tab = small_study.table()
    assert set(tab) == {"MISE", "ISB", "IV"}


def test_study_deterministic_and_thread_independent(small_study):
    again = run_study("model1", n=200, bandwidth_grid=[0.08, 0.1], reps=6, seed=3,
                      ll_bandwidths=[0.09], threads=1)
    key = lambda r: (r.h, r.component)
    a = sorted(small_study.rows, key=key)
    b = sorted(again.rows, key=key)
    assert a == b


def test_identical_seeds_have_zero_variance():
    rep = run_study("model2", n=200, bandwidth_grid=[0.5], seeds=[11, 11], ll_bandwidths=[0.4],
                    threads=2)
    for r in rep.rows:
        assert r.iv == 0.0
        assert r.mise == pytest.approx(r.isb, abs=1e-15)


def test_study_needs_two_reps():
    with pytest.raises(ValueError):
        run_study("model1", n=100, bandwidth_grid=[0.1], reps=1)


def test_failed_replications_are_excluded():
    rep = run_study("model1", n=200, bandwidth_grid=[0.09], reps=3, seed=0, max_iters=1,
                    ll_bandwidths=[0.09], threads=1)
    assert len(rep.failures[0.09]) == 3
    assert rep.row(0.09, "f1").reps_used == 0
    assert rep.row(0.09, "local-linear-joint").reps_used == 3


def test_study_csv_outputs(small_study, tmp_path):
    small_study.write_table_csv(tmp_path / "t.csv")
    small_study.write_boxplot_csv(tmp_path / "b.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "model,statistic,f1,f2,f3,joint,local-linear-joint"
    assert [ln.split(",")[1] for ln in lines[1:]] == ["MISE", "ISB", "IV", "bandwidth"]
    box = (tmp_path / "b.csv").read_bytes()
    assert b"\r" not in box
    assert box.splitlines()[0] == b"h,component,MISE,ISB,IV,reps_used"
    assert len(box.splitlines()) == 1 + 2 * 4 + 1


@pytest.mark.slow
def test_model1_bias_variance_tradeoff():
    grid = [0.070, 0.075, 0.080, 0.085, 0.090, 0.095, 0.100]
    rep = run_study("model1", n=400, bandwidth_grid=grid, reps=100, seed=1,
                    ll_bandwidths=[0.085])
    for c in ("f1", "f2", "f3"):
        iv = [rep.row(h, c).iv for h in grid]
        isb = [rep.row(h, c).isb for h in grid]
        assert sum(b > a for a, b in zip(iv, iv[1:])) <= 1, (c, iv)
        assert sum(b < a for a, b in zip(isb, isb[1:])) <= 1, (c, isb)
