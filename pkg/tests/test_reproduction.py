"""
Quick-profile sweeps over random and linear deployments. Deselected by default, run with `pytest -m slow`.
"""
import numpy as np
import pytest
from scipy import stats

from core import BandId
from experiment import COMBINED, load_experiment_spec, quick_profile, run_experiment
from run_experiment import DEFAULT_CONFIG
from topology import Deployment

pytestmark = pytest.mark.slow

BANDS_24, BANDS_868 = BandId.BAND_24GHZ.value, BandId.BAND_868MHZ.value


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    spec = quick_profile(load_experiment_spec(DEFAULT_CONFIG))
    spec = spec.replace(
        deployments=(Deployment.RANDOM, Deployment.LINEAR), output_dir=str(tmp_path_factory.mktemp("quick"))
    )
    result = run_experiment(spec, workers=4)
    assert result.failures == []
    return spec, result


def cases_of(result, num_nodes=None, deployment=Deployment.RANDOM):
    return [
        c for c in result.cases
        if c.deployment == deployment and (num_nodes is None or c.num_nodes == num_nodes)
    ]


def test_combined_pdr_is_at_least_the_best_band(sweep):
    _, result = sweep
    assert len(result.cases) >= 30
    for case in result.cases:
        r = case.reports
        assert r[COMBINED].pdr >= max(r[BANDS_24].pdr, r[BANDS_868].pdr)


def test_first_arrival_latency_is_the_smaller_one(sweep):
    _, result = sweep
    for case in result.cases:
        for o in case.outcomes:
            if o.delivered_24 and o.delivered_868:
                assert o.latency == min(o.t_arrival_24, o.t_arrival_868) - o.t_gen


def test_linear_deployments_form_within_the_setup_time(sweep):
    _, result = sweep
    for case in cases_of(result, deployment=Deployment.LINEAR):
        assert case.traces[BandId.BAND_868MHZ].unjoined_at_setup == (), f"{case.name} seed={case.seed:#x}"


def test_sub_ghz_needs_fewer_retries(sweep):
    _, result = sweep
    cases = cases_of(result, 40)
    agreeing = 0
    for case in cases:
        total = {band: case.reports[band].total_retries for band in (BANDS_24, BANDS_868, COMBINED)}
        if total[BANDS_868] < total[BANDS_24] and total[BANDS_868] <= total[COMBINED] <= total[BANDS_24]:
            agreeing += 1
    assert agreeing >= len(cases) - 1


def test_combining_improves_lossy_runs(sweep):
    _, result = sweep
    for case in result.cases:
        r = case.reports
        if r[BANDS_24].pdr < 1.0:
            assert r[COMBINED].pdr > r[BANDS_24].pdr, f"{case.name} seed={case.seed:#x}"


def test_combining_gain_grows_with_network_size(sweep):
    _, result = sweep
    sizes, gains = [], []
    for case in cases_of(result):
        sizes.append(case.num_nodes)
        gains.append(case.reports[COMBINED].pdr - case.reports[BANDS_24].pdr)
    assert stats.spearmanr(sizes, gains)[0] > 0


def test_24ghz_pdr_does_not_grow_with_network_size(sweep):
    spec, result = sweep
    medians = [np.median([c.reports[BANDS_24].pdr for c in cases_of(result, n)]) for n in spec.node_counts]
    assert all(np.diff(medians) <= 0), medians


def test_a_minority_of_nodes_favors_868mhz(sweep):
    _, result = sweep
    shares = []
    for case in cases_of(result, 40):
        classified = [band for band in case.winners.values() if band is not None]
        shares.append(sum(band == BandId.BAND_868MHZ for band in classified) / len(classified))
    assert 0.0 < np.median(shares) < 0.5, shares


def test_sub_ghz_paths_are_not_longer(sweep):
    spec, result = sweep
    for n in spec.node_counts:
        cases = cases_of(result, n)
        hops_24 = np.median([c.reports[BANDS_24].mean_hops or 0.0 for c in cases])
        hops_868 = np.median([c.reports[BANDS_868].mean_hops or 0.0 for c in cases])
        assert hops_868 <= hops_24, n


def test_parallel_sweep_writes_identical_files(sweep, tmp_path):
    spec, _ = sweep
    small = spec.replace(deployments=(Deployment.RANDOM,), node_counts=(10,), seeds=spec.seeds[:2])
    run_experiment(small.replace(output_dir=str(tmp_path / "serial")), workers=1)
    run_experiment(small.replace(output_dir=str(tmp_path / "parallel")), workers=2)
    serial = sorted(p.relative_to(tmp_path / "serial") for p in (tmp_path / "serial").rglob("*") if p.is_file())
    for name in serial:
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes(), name
