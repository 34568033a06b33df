import pytest

from ccdopf.config import ConfigError, parse_pv_config
from ccdopf.uncertainty import forecast_range_check


def test_fleet_defaults(net33, fleet):
    assert fleet.nodes == [2, 3, 6, 18, 21, 25, 32]
    specs = fleet.specs(net33)
    # 7.54 MW scaled by 0.035 on a 10 MVA base
    s6 = specs[2]
    assert s6.p_ref == pytest.approx(7.54 * 0.035 / 10)
    assert s6.s_rated == pytest.approx(1.1 * s6.p_ref)
    assert s6.pf == 0.95
    assert sum(s.p_ref for s in specs) * 10 == pytest.approx(1.05, abs=1e-3)


def test_fleet_model(net33, fleet):
    m = fleet.model(net33)
    assert m.epsilon == 0.05
    assert m.sigma[6] == pytest.approx(0.1 * m.mean[6])
    assert m.forecast_hi[6] == pytest.approx(1.2 * m.mean[6])
    assert all(v == [] for v in forecast_range_check(m).values())
    assert fleet.model(net33, epsilon=0.2).epsilon == 0.2


def test_node5(net33, node5):
    (s,) = node5.specs(net33)
    assert (s.node, s.s_rated, s.p_ref, s.p_headroom) == pytest.approx((5, 0.05, 0.03, 0.01))


def test_overrides(net33):
    cfg = parse_pv_config("epsilon = 0.1\npv node=4 p_mw=0.2 s_mva=0.3 sigma_frac=0.2 eps=0.02 droop=3\n")
    m = cfg.model(net33)
    assert m.eps(4) == 0.02 and m.sigma[4] == pytest.approx(0.2 * 0.02)
    assert cfg.specs(net33)[0].droop_q == 3.0
    # an explicit epsilon overrides the per-line value
    assert cfg.model(net33, epsilon=0.3).eps(4) == 0.3


@pytest.mark.parametrize("text, needle", [
    ("", "no pv lines"),
    ("pv node=2 p_mw=1\n", "missing"),
    ("pv node=2 p_mw=1 s_mva=0.5\n", "p_mw <= s_mva"),
    ("pv node=2 p_mw=0.1 s_mva=0.5 pf=1.5\n", "pf"),
    ("pv node=2 p_mw=0.1 s_mva=0.5 colour=red\n", "unknown pv field"),
    ("pv node=2 p_mw=0.1 s_mva=0.5\npv node=2 p_mw=0.1 s_mva=0.5\n", "listed twice"),
    ("bogus = 1\npv node=2 p_mw=0.1 s_mva=0.5\n", "unknown setting"),
    ("epsilon = 0.7\npv node=2 p_mw=0.1 s_mva=0.5\n", "epsilon"),
    ("scale = 0\npv node=2 p_mw=0.1 s_mva=0.5\n", "scale"),
    ("pv node=2 p_mw=abc s_mva=0.5\n", "not a number"),
    ("sigma_mode = wide\npv node=2 p_mw=0.1 s_mva=0.5\n", "sigma_mode"),
])
def test_rejects(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_pv_config(text)


def test_error_line_number():
    with pytest.raises(ConfigError) as exc:
        parse_pv_config("# fleet\nscale = 1\npv node=2 p_mw=x s_mva=1\n")
    assert exc.value.lineno == 3


def test_unknown_bus(net33):
    with pytest.raises(ConfigError, match="unknown bus"):
        parse_pv_config("pv node=99 p_mw=0.1 s_mva=0.5\n").specs(net33)
