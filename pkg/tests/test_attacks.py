import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldppoison import ldp
from ldppoison.aggregation import AggregationConfig, AggregationConfigError, fedavg, geometric_median, multikrum
from ldppoison.attacks import (
    AttackConfigError,
    AttackPlan,
    EavesdropView,
    adapa_generate,
    adapa_init,
    fit_on_def,
    ldpfl_dimension_merge,
    llra_update,
    multikrum_radius,
    restricted_median,
    rpa_update,
    tmma_combine,
    tmma_update,
)
from ldppoison.data import Dataset, synth_blobs
from ldppoison.ldp import ProtocolConfig, is_two_point, server_ranges
from ldppoison.models import ModelSpec, init_params, loss
from ldppoison.params import ParamVector, l2_norm, make_shapes

SPEC = ModelSpec("logistic_regression", 4, 3)


@pytest.fixture
def blob():
    return synth_blobs(3, 4, 20, 0.5, seed=0)


@pytest.fixture
def theta0():
    return init_params(SPEC, 1)


def pcfg(protocol="ldpsgd", **kw):
    base = dict(protocol=protocol, eta=0.1, epochs=1, sample_prob=1.0, clip_c=1e6, sigma=0.0, epsilon=1.0)
    base.update(kw)
    return ProtocolConfig(**base)


def plan(kind, **kw):
    base = dict(n_malicious=1, n_total=4)
    if kind == "tmma":
        base["knowledge"] = "partial"
    if kind == "adapa":
        base["knowledge"] = "global"
    base.update(kw)
    return AttackPlan(kind, **base)


def vecs(rows):
    return [ParamVector.flat(np.asarray(r, dtype=float)) for r in rows]


# --- plan / view ----------------------------------------------------------------


def test_plan_validation_and_labels():
    assert plan("llra", mode="input").label == "LLRA-I"
    assert plan("tmma", mode="output").label == "TMMA-O"
    assert plan("adapa").label == "AdaPA"
    with pytest.raises(AttackConfigError):
        AttackPlan("tmma", 1, 4, knowledge="local")
    with pytest.raises(AttackConfigError):
        AttackPlan("adapa", 1, 4, knowledge="partial")
    with pytest.raises(AttackConfigError):
        AttackPlan("llra", 5, 4)
    with pytest.raises(AttackConfigError):
        AttackPlan("llra", 1, 4, ate=0)
    with pytest.raises(AttackConfigError):
        AttackPlan("flip", 1, 4)


def test_view_respects_knowledge():
    ups = vecs([[0.0], [1.0], [2.0]])
    assert EavesdropView.for_knowledge("local", 4, 1, ups) == EavesdropView(0, 0, None)
    assert EavesdropView.for_knowledge("partial", 4, 1, ups).benign_uploads is None
    assert len(EavesdropView.for_knowledge("global", 4, 1, ups).require_uploads()) == 3
    with pytest.raises(AttackConfigError):
        EavesdropView(4, 1, tuple(ups[:2]))
    with pytest.raises(AttackConfigError):
        EavesdropView(4, 1).require_uploads()


# --- RPA ------------------------------------------------------------------------


def test_rpa_zero_scale_returns_global(theta0):
    out = rpa_update(theta0, pcfg(), plan("rpa", t_scale=0.0), np.random.default_rng(0))
    assert out == theta0


def test_rpa_step_norm(theta0):
    c = pcfg(eta=0.3, clip_c=2.0)
    out = rpa_update(theta0, c, plan("rpa", t_scale=1.5, ate=4), np.random.default_rng(0))
    step = l2_norm(ParamVector.flat(out.values - theta0.values))
    assert step == pytest.approx(0.3 * 1.5 * 2.0 * 4, rel=1e-12)


def test_rpa_ldpfl_two_point(theta0):
    ranges = server_ranges(theta0)
    out = rpa_update(theta0, pcfg("ldpfl"), plan("rpa"), np.random.default_rng(0), ranges)
    assert is_two_point(out, ranges, 1.0)


# --- LLRA -----------------------------------------------------------------------


def test_llra_input_equals_output_without_ldp(blob, theta0):
    # with no noise, full batches and a huge clip bound the LDP step is the identity
    c = pcfg(epochs=2)
    i = llra_update(theta0, blob, c, plan("llra", mode="input", ate=3), np.random.default_rng(0))
    o = llra_update(theta0, blob, c, plan("llra", mode="output", ate=3), np.random.default_rng(0))
    np.testing.assert_array_equal(i.values, o.values)


def test_llra_raises_local_loss(blob, theta0):
    out = llra_update(theta0, blob, pcfg(), plan("llra", ate=5), np.random.default_rng(0))
    assert loss(out, blob.as_batch()) > loss(theta0, blob.as_batch())


def test_llra_ate_controls_epochs(blob, theta0):
    one = llra_update(theta0, blob, pcfg(), plan("llra", ate=1), np.random.default_rng(0))
    expect = ldp.ldpsgd_local_round(theta0, blob, pcfg(), np.random.default_rng(0), malicious=True, epochs=1)
    assert one == expect


@pytest.mark.parametrize("mode", ["input", "output"])
def test_llra_ldpfl_outputs_two_point(blob, theta0, mode):
    ranges = server_ranges(theta0)
    out = llra_update(theta0, blob, pcfg("ldpfl", eta=0.01), plan("llra", mode=mode), np.random.default_rng(0),
                      ranges)
    assert is_two_point(out, ranges, 1.0)


def test_llra_ldpfl_needs_ranges(blob, theta0):
    with pytest.raises(AttackConfigError):
        llra_update(theta0, blob, pcfg("ldpfl"), plan("llra"), np.random.default_rng(0))


# --- TMMA -----------------------------------------------------------------------


def test_tmma_combine_algebra():
    t, e = ParamVector.flat([1.0, 2.0]), ParamVector.flat([0.5, -1.0])
    np.testing.assert_allclose(tmma_combine(t, e, 4, 1).values, 4 * t.values - 3 * e.values)
    assert tmma_combine(t, e, 3, 3) == t
    with pytest.raises(AttackConfigError):
        tmma_combine(t, e, 3, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 20))
def test_tmma_average_hits_target(seed, n_total, n_mal):
    n_mal = min(n_mal, n_total)
    rng = np.random.default_rng(seed)
    t, e = ParamVector.flat(rng.standard_normal(5)), ParamVector.flat(rng.standard_normal(5))
    adv = tmma_combine(t, e, n_total, n_mal)
    avg = fedavg([adv] * n_mal + [e] * (n_total - n_mal))
    np.testing.assert_allclose(avg.values, t.values, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("n_total", [4, 10])
def test_tmma_update_mirrors_benign(blob, theta0, n_total):
    c = pcfg(epochs=2)
    p = plan("tmma", n_total=n_total, n_malicious=1, ate=3)
    adv = tmma_update(theta0, blob, c, p, np.random.default_rng(0))
    benign = ldp.ldpsgd_local_round(theta0, blob, c, np.random.default_rng(9))
    target = ldp.ldpsgd_local_round(theta0, blob, c, np.random.default_rng(9), malicious=True, epochs=3)
    avg = fedavg([adv] + [benign] * (n_total - 1))
    np.testing.assert_allclose(avg.values, target.values, rtol=1e-9, atol=1e-12)


def test_tmma_estimate_from_view(blob, theta0):
    c = pcfg()
    ups = [theta0.with_values(r) for r in np.random.default_rng(0).standard_normal((3, SPEC.dim))]
    p = plan("tmma", knowledge="global", est_from_view=True)
    adv = tmma_update(theta0, blob, c, p, np.random.default_rng(0), view=EavesdropView(4, 1, tuple(ups)))
    np.testing.assert_allclose(fedavg([adv] + ups).values,
                               ldp.ldpsgd_local_round(theta0, blob, c, np.random.default_rng(0),
                                                      malicious=True).values, rtol=1e-9, atol=1e-12)


# --- AdaPA: initialisation and projection -----------------------------------------


def test_adapa_init_choices():
    ups = vecs([[0.0, 0.0], [0.0, 0.0], [9.0, 9.0]])
    view = EavesdropView(4, 1, tuple(ups))
    g = ParamVector.flat([5.0, 5.0])
    assert adapa_init(g, view, AggregationConfig()) == g
    np.testing.assert_allclose(adapa_init(g, view, AggregationConfig("multikrum", f=0, k=1)).values, 0.0,
                               atol=1e-6)
    np.testing.assert_allclose(adapa_init(g, view, AggregationConfig("trimmedmean", beta=1)).values, [3.0, 3.0])
    assert adapa_init(g, view, AggregationConfig("multikrum", f=0, k=1), protocol="ldpfl") == g


def test_fit_on_def_trimmed_mean_example():
    ups = vecs([[0.1], [0.2], [0.3], [0.4]])
    view = EavesdropView(5, 1, tuple(ups))
    agg = AggregationConfig("trimmedmean", beta=1)
    assert fit_on_def(ParamVector.flat([0.9]), view, agg, 1.0).values[0] == 0.3
    assert fit_on_def(ParamVector.flat([-2.0]), view, agg, 1.0).values[0] == 0.2
    assert fit_on_def(ParamVector.flat([0.25]), view, agg, 1.0).values[0] == 0.25


def test_fit_on_def_infinite_scale_is_identity():
    view = EavesdropView(4, 1, tuple(vecs([[0.0], [1.0], [2.0]])))
    x = ParamVector.flat([50.0])
    assert fit_on_def(x, view, AggregationConfig("multikrum", f=0, k=1), math.inf) == x
    assert fit_on_def(x, view, AggregationConfig(), 1.0) == x


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 3.0))
def test_fit_on_def_multikrum_respects_radius(seed, scal):
    rng = np.random.default_rng(seed)
    ups = vecs(rng.standard_normal((5, 4)))
    view = EavesdropView(6, 1, tuple(ups))
    geo = geometric_median(ups)
    radius = multikrum_radius(ups, geo, scal)
    x = ParamVector.flat(rng.standard_normal(4) * 20)
    out = fit_on_def(x, view, AggregationConfig("multikrum", f=1, k=2), scal, geo=geo)
    assert np.linalg.norm(out.values - geo.values) <= radius
    # points already inside the ball are untouched
    inside = geo.with_values(geo.values + 0.5 * radius * np.eye(4)[0])
    assert fit_on_def(inside, view, AggregationConfig("multikrum", f=1, k=2), scal, geo=geo) == inside


def test_adapa_selected_by_multikrum_constructed_instance():
    # four benign uploads around the origin; two compromised clients share the crafted vector
    ups = vecs([[1, 0], [-1, 0], [0, 1], [0, -1]])
    view = EavesdropView(6, 2, tuple(ups))
    agg = AggregationConfig("multikrum", f=1, k=2)
    crafted = fit_on_def(ParamVector.flat([-10.0, -10.0]), view, agg, 1.0)
    np.testing.assert_allclose(crafted.values, [-math.sqrt(0.5)] * 2, rtol=1e-9)
    _, sel = multikrum(list(ups) + [crafted, crafted], f=1, k=2)
    assert sel == (4, 5)


def test_adapa_generate_ldpsgd_stays_in_ball(blob, theta0):
    rng = np.random.default_rng(0)
    ups = [theta0.with_values(theta0.values + 0.1 * rng.standard_normal(theta0.dim)) for _ in range(5)]
    view = EavesdropView(7, 2, tuple(ups))
    agg = AggregationConfig("multikrum", f=2, k=3)
    out = adapa_generate(theta0, view, blob, pcfg(eta=5.0), plan("adapa", n_total=7, n_malicious=2, ate=5),
                         agg, np.random.default_rng(1))
    geo = geometric_median(ups)
    assert np.linalg.norm(out.values - geo.values) <= multikrum_radius(ups, geo, 1.0)
    assert loss(out, blob.as_batch()) > loss(geo, blob.as_batch())


def test_adapa_generate_trimmed_mean_in_survivor_range(blob, theta0):
    rng = np.random.default_rng(2)
    ups = [theta0.with_values(theta0.values + 0.1 * rng.standard_normal(theta0.dim)) for _ in range(6)]
    view = EavesdropView(7, 1, tuple(ups))
    agg = AggregationConfig("trimmedmean", beta=1)
    out = adapa_generate(theta0, view, blob, pcfg(eta=5.0), plan("adapa", n_total=7, ate=3), agg,
                         np.random.default_rng(1))
    x = np.sort(np.stack([u.values for u in ups]), axis=0)
    assert np.all(out.values >= x[1]) and np.all(out.values <= x[-2])


def test_adapa_needs_uploads(blob, theta0):
    with pytest.raises(AttackConfigError):
        adapa_generate(theta0, EavesdropView(4, 1), blob, pcfg(), plan("adapa"),
                       AggregationConfig("multikrum", f=0, k=1), np.random.default_rng(0))


# --- AdaPA on LDP-FL ---------------------------------------------------------------


def two_point_uploads(rng, n, d, ranges, eps):
    shapes = make_shapes([("w", d)])
    proto = ParamVector(np.zeros(d), shapes)
    low, high = ldp.two_point_values(proto, ranges, eps)
    return [proto.with_values(np.where(rng.random(d) < 0.5, high, low)) for _ in range(n)], low, high


def test_restricted_median_majority_and_ties():
    ranges, eps = [(0.0, 1.0)], math.log(3)
    shapes = make_shapes([("w", 3)])
    h, l_ = 2.0, -2.0
    ups = [ParamVector(np.array(r), shapes) for r in ([h, h, l_], [h, l_, l_], [l_, h, h], [l_, l_, h])]
    # column 0: 2 vs 2 tie -> low; column 1: tie -> low; column 2: tie -> low
    np.testing.assert_array_equal(restricted_median(ups, ranges, eps).values, [l_, l_, l_])
    np.testing.assert_array_equal(restricted_median(ups[:3], ranges, eps).values, [h, h, l_])
    with pytest.raises(AttackConfigError):
        restricted_median([ParamVector(np.array([0.0, h, h]), shapes)], ranges, eps)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_dimension_merge_count(seed, scal):
    rng = np.random.default_rng(seed)
    ranges, eps = [(0.5, 0.25)], 1.0
    ups, low, high = two_point_uploads(rng, 5, 40, ranges, eps)
    res = restricted_median(ups, ranges, eps)
    adv = res.with_values(np.where(rng.random(40) < 0.5, high, low))
    out = ldpfl_dimension_merge(adv, res, ups, scal, rng)
    max_diff = min(int(np.sum(u.values != res.values)) for u in ups)
    differing = int(np.sum(adv.values != res.values))
    assert int(np.sum(out.values != res.values)) == min(math.floor(scal * max_diff + 1e-9), differing)
    # every changed coordinate came from the adversarial vector
    changed = out.values != res.values
    np.testing.assert_array_equal(out.values[changed], adv.values[changed])
    assert is_two_point(out, ranges, eps)


def test_dimension_merge_rejects_bad_scale():
    ups = vecs([[1.0]])
    with pytest.raises(AttackConfigError):
        ldpfl_dimension_merge(ups[0], ups[0], ups, 1.5, np.random.default_rng(0))


def test_adapa_ldpfl_output_two_point(blob, theta0):
    ranges = server_ranges(theta0)
    rng = np.random.default_rng(0)
    ups = [ldp.data_perturbation(theta0, ranges, 1.0, rng) for _ in range(5)]
    view = EavesdropView(6, 1, tuple(ups))
    out = adapa_generate(theta0, view, blob, pcfg("ldpfl"), plan("adapa", n_total=6, ate=2, scal=0.5),
                         AggregationConfig("multikrum", f=1, k=2), rng, ranges)
    assert is_two_point(out, ranges, 1.0)
    with pytest.raises(AggregationConfigError):
        adapa_generate(theta0, view, blob, pcfg("ldpfl"), plan("adapa", n_total=6),
                       AggregationConfig("trimmedmean", beta=1), rng, ranges)


def test_empty_local_data_still_projects(theta0):
    empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int), 3)
    ups = [theta0.with_values(r) for r in np.random.default_rng(0).standard_normal((3, SPEC.dim))]
    view = EavesdropView(4, 1, tuple(ups))
    out = adapa_generate(theta0, view, empty, pcfg(), plan("adapa"), AggregationConfig("trimmedmean", beta=1),
                         np.random.default_rng(0))
    # the mean of three values clamped to the beta=1 survivor range is their median
    np.testing.assert_array_equal(out.values, np.median(np.stack([u.values for u in ups]), axis=0))
