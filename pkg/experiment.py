"""
Seed sweeps over (deployment, node count) cases: topology generation, both band runs, sink combining, and the result
files (traces, per-case metrics, aggregate tables and plot-ready CSV series).
"""
import csv
import dataclasses
import hashlib
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from flax import struct

from core import (
    DEFAULT_BAND_24GHZ,
    DEFAULT_BAND_868MHZ,
    DEFAULT_SEED,
    AppConfig,
    BandConfig,
    BandId,
    ConfigError,
    validate_app_config,
    validate_band_config,
)
from engine import RunConfig, RunTrace, generate_app_schedule, run_band, write_trace
from metrics import (
    COMBINED,
    CombinedPacketOutcome,
    MetricsReport,
    band_report,
    combine,
    winning_band_per_node,
    write_metrics_json,
)
from msf import MsfConfig
from propagation import WaterfallTable, default_waterfall, load_waterfall
from rpl import RplConfig
from topology import Deployment, Topology, build_topology
from tsch import MacConfig
from utils import MetricLogger, make_rng

log = logging.getLogger(__name__)

OUTPUT_FORMAT_VERSION = 1
CDF_RESOLUTION_US = 10_000
QUICK_SETUP_TIME = 600.0
QUICK_DURATION = 900.0
QUICK_NODE_COUNTS = (10, 20, 40)
QUICK_NUM_SEEDS = 5
REPORT_BANDS = (BandId.BAND_24GHZ.value, BandId.BAND_868MHZ.value, COMBINED)
AGGREGATED_METRICS = ["pdr", "mean_latency_s", "total_retries", "mean_retries_per_node", "mean_hops", "unjoined_nodes"]


@struct.dataclass
class ExperimentSpec:
    deployments: tuple[Deployment, ...] = (Deployment.LINEAR, Deployment.RANDOM)
    node_counts: tuple[int, ...] = (40, 80, 160)
    side_length: float = 100.0                                  # L, meters
    bands: tuple[BandConfig, ...] = (DEFAULT_BAND_24GHZ, DEFAULT_BAND_868MHZ)
    app: AppConfig = AppConfig()
    seeds: tuple[int, ...] = (DEFAULT_SEED,)
    output_dir: str = struct.field(pytree_node=False, default="results")
    mac: MacConfig = MacConfig()
    rpl: RplConfig = RplConfig()
    msf: MsfConfig = MsfConfig()
    waterfall: Optional[WaterfallTable] = None                   # default_waterfall() when None
    check_invariants: bool = False
    strict_paper_mode: bool = False

    @property
    def band_24(self) -> BandConfig:
        return next(b for b in self.bands if b.band_id == BandId.BAND_24GHZ)

    @property
    def band_868(self) -> BandConfig:
        return next(b for b in self.bands if b.band_id == BandId.BAND_868MHZ)

    @property
    def cases(self) -> list[tuple[Deployment, int, int]]:
        return [(d, n, s) for d in self.deployments for n in self.node_counts for s in self.seeds]


def parse_seed(value: Any) -> int:
    """Seeds are integers or integer literals in any base, e.g. '0x74C2A74018BDB'"""
    try:
        seed = value if isinstance(value, int) else int(str(value), 0)
    except ValueError as e:
        raise ConfigError(f"seeds: {value!r} is not an integer") from e
    if seed < 0:
        raise ConfigError(f"seeds: must be non-negative (got {seed})")
    return seed


def _override(instance: Any, overrides: dict, section: str) -> Any:
    names = {f.name for f in dataclasses.fields(instance)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {unknown}")
    return instance.replace(**overrides)


def load_experiment_spec(path: Path) -> ExperimentSpec:
    """
    Reads an experiment JSON file. Top-level keys mirror `ExperimentSpec`; `app`, `mac`, `rpl` and `msf` hold
    field overrides, `bands` holds per-band overrides keyed by band id, and `waterfall` names a table file relative
    to the configuration file.
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e

    allowed = {"deployments", "node_counts", "side_length", "bands", "app", "seeds", "output_dir", "mac", "rpl",
               "msf", "waterfall", "check_invariants", "strict_paper_mode"}
    unknown = sorted(set(document) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")

    spec = ExperimentSpec()
    app = dict(document.get("app", {}))
    if "seed" in app:
        app["seed"] = parse_seed(app["seed"])
    spec = spec.replace(app=_override(spec.app, app, "app"))
    for section in ("mac", "rpl", "msf"):
        spec = spec.replace(**{section: _override(getattr(spec, section), document.get(section, {}), section)})

    band_overrides = document.get("bands", {})
    bands = []
    for band in spec.bands:
        overrides = band_overrides.get(band.band_id.value, {})
        if "band_id" in overrides:
            raise ConfigError(f"bands.{band.band_id.value}: band_id cannot be overridden")
        bands.append(_override(band, overrides, f"bands.{band.band_id.value}"))
    unknown_bands = sorted(set(band_overrides) - {b.value for b in BandId})
    if unknown_bands:
        raise ConfigError(f"bands: unknown band(s) {unknown_bands}")

    try:
        deployments = tuple(Deployment(d) for d in document.get("deployments", [d.value for d in spec.deployments]))
    except ValueError as e:
        raise ConfigError(f"deployments: {e}") from e
    seeds = tuple(parse_seed(s) for s in document.get("seeds", [spec.app.seed]))

    waterfall = None
    if document.get("waterfall") is not None:
        waterfall = load_waterfall(path.parent / document["waterfall"])

    spec = spec.replace(
        deployments=deployments,
        node_counts=tuple(int(n) for n in document.get("node_counts", spec.node_counts)),
        side_length=float(document.get("side_length", spec.side_length)),
        bands=tuple(bands),
        seeds=seeds,
        output_dir=str(document.get("output_dir", spec.output_dir)),
        waterfall=waterfall,
        check_invariants=bool(document.get("check_invariants", False)),
        strict_paper_mode=bool(document.get("strict_paper_mode", False)),
    )
    validate_experiment_spec(spec)
    return spec


def quick_profile(spec: ExperimentSpec) -> ExperimentSpec:
    """Desk-scale sweep: 600 s setup, 900 s of traffic, 10/20/40 nodes, 5 consecutive seeds from the first one"""
    first_seed = spec.seeds[0] if spec.seeds else spec.app.seed
    return spec.replace(
        app=spec.app.replace(setup_time=QUICK_SETUP_TIME, duration=QUICK_DURATION),
        node_counts=QUICK_NODE_COUNTS,
        seeds=tuple(first_seed + i for i in range(QUICK_NUM_SEEDS)),
    )


def validate_experiment_spec(spec: ExperimentSpec) -> None:
    violations = []
    if not spec.deployments:
        violations.append("deployments: must not be empty")
    if not spec.node_counts:
        violations.append("node_counts: must not be empty")
    if any(n < 2 for n in spec.node_counts):
        violations.append(f"node_counts: every case needs at least 2 nodes (got {list(spec.node_counts)})")
    if not spec.seeds:
        violations.append("seeds: must not be empty")
    if spec.side_length <= 0:
        violations.append(f"side_length: must be positive (got {spec.side_length})")
    if sorted(b.band_id.value for b in spec.bands) != sorted(b.value for b in BandId):
        violations.append("bands: exactly one 2.4 GHz and one 868 MHz band are required")
    else:
        for band in spec.bands:
            band_check = validate_band_config(band, spec.strict_paper_mode, spec.app.frame_bytes)
            violations.extend(f"bands.{band.band_id.value}.{v}" for v in band_check.violations)
    violations.extend(f"app.{v}" for v in validate_app_config(spec.app).violations)
    if violations:
        raise ConfigError("; ".join(violations))


def spec_to_json(spec: ExperimentSpec) -> dict:
    """Canonical description of everything that determines the results (the output directory excluded)"""
    def fields_of(instance) -> dict:
        return {f.name: getattr(instance, f.name) for f in dataclasses.fields(instance)}

    waterfall = spec.waterfall if spec.waterfall is not None else default_waterfall()
    return {
        "deployments": [d.value for d in spec.deployments],
        "node_counts": list(spec.node_counts),
        "side_length": spec.side_length,
        "bands": {b.band_id.value: {k: v for k, v in fields_of(b).items() if k != "band_id"} for b in spec.bands},
        "app": {k: (f"{v:#x}" if k == "seed" else v) for k, v in fields_of(spec.app).items()},
        "seeds": [f"{s:#x}" for s in spec.seeds],
        "mac": fields_of(spec.mac),
        "rpl": fields_of(spec.rpl),
        "msf": fields_of(spec.msf),
        "waterfall": [list(a) for a in waterfall.anchors],
        "check_invariants": spec.check_invariants,
        "strict_paper_mode": spec.strict_paper_mode,
    }


def spec_hash(spec: ExperimentSpec) -> str:
    canonical = json.dumps(spec_to_json(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def case_name(deployment: Deployment, num_nodes: int) -> str:
    return f"{deployment.value}-{num_nodes}"


@dataclass
class CaseResult:
    deployment: Deployment
    num_nodes: int
    seed: int
    topology: Topology
    traces: dict[BandId, RunTrace]
    outcomes: list[CombinedPacketOutcome]
    reports: dict[str, MetricsReport]
    winners: dict[int, Optional[BandId]]

    @property
    def name(self) -> str:
        return case_name(self.deployment, self.num_nodes)


@dataclass
class CaseFailure:
    deployment: Deployment
    num_nodes: int
    seed: int
    error: str


@dataclass
class ExperimentResult:
    spec_hash: str
    cases: list[CaseResult]
    failures: list[CaseFailure]
    logger: MetricLogger


def run_case(spec: ExperimentSpec, deployment: Deployment, num_nodes: int, seed: int) -> CaseResult:
    """
    One topology, both bands. The topology and the application schedule are drawn once from `seed` and shared
    verbatim by the two band runs.
    """
    app = spec.app.replace(seed=seed)
    rng = make_rng(seed, "topology", deployment.value, str(num_nodes))
    topology = build_topology(deployment, num_nodes, spec.side_length, rng, spec.band_24)
    schedule = generate_app_schedule(app, range(1, num_nodes), make_rng(seed, "app-schedule"))
    waterfall = spec.waterfall if spec.waterfall is not None else default_waterfall()

    traces = {}
    for band in (spec.band_24, spec.band_868):
        config = RunConfig(
            topology=topology,
            band=band,
            app=app,
            waterfall=waterfall,
            mac=spec.mac,
            rpl=spec.rpl,
            msf=spec.msf,
            app_schedule=schedule,
            check_invariants=spec.check_invariants,
            strict_paper_mode=spec.strict_paper_mode,
        )
        traces[band.band_id] = run_band(config)

    trace24, trace868 = traces[BandId.BAND_24GHZ], traces[BandId.BAND_868MHZ]
    outcomes, combined = combine(trace24, trace868)
    reports = {BandId.BAND_24GHZ.value: band_report(trace24), BandId.BAND_868MHZ.value: band_report(trace868),
               COMBINED: combined}
    log.info("%s seed=%#x: pdr 24ghz=%.3f 868mhz=%.3f combined=%.3f", case_name(deployment, num_nodes), seed,
             *(reports[b].pdr for b in REPORT_BANDS))
    return CaseResult(deployment, num_nodes, seed, topology, traces, outcomes, reports,
                      winning_band_per_node(outcomes))


def _run_case_task(task: tuple[ExperimentSpec, Deployment, int, int]) -> CaseResult:
    return run_case(*task)


def _seed_label(seed: int) -> str:
    return f"{seed:#x}"


def _header(spec_digest: str, name: str) -> str:
    return f"# format={name}/{OUTPUT_FORMAT_VERSION} spec={spec_digest}\n"


def _write_csv(path: Path, spec_digest: str, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="") as f:
        f.write(_header(spec_digest, name))
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> ExperimentResult:
    """
    Runs every (deployment, node count, seed) case and writes the result files into `spec.output_dir`.

    A failing case is logged and recorded in failures.csv; the remaining cases still run. Outputs are written in case
    order once all runs finished, so they do not depend on the worker count.
    """
    validate_experiment_spec(spec)
    digest = spec_hash(spec)
    tasks = [(spec, d, n, s) for d, n, s in spec.cases]

    results: list[Optional[CaseResult]] = [None] * len(tasks)
    errors: list[Optional[str]] = [None] * len(tasks)
    if workers <= 1:
        for i, task in enumerate(tasks):
            try:
                results[i] = _run_case_task(task)
            except Exception as e:
                errors[i] = f"{type(e).__name__}: {e}"
    else:
        with ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("spawn")) as pool:
            futures = [pool.submit(_run_case_task, task) for task in tasks]
            for i, future in enumerate(futures):
                try:
                    results[i] = future.result()
                except Exception as e:
                    errors[i] = f"{type(e).__name__}: {e}"

    cases, failures = [], []
    for (_, deployment, n, seed), result, error in zip(tasks, results, errors):
        if error is not None:
            log.warning("%s seed=%#x failed: %s", case_name(deployment, n), seed, error)
            failures.append(CaseFailure(deployment, n, seed, error))
        else:
            cases.append(result)

    logger = MetricLogger(AGGREGATED_METRICS)
    for case in cases:
        for band in REPORT_BANDS:
            report = case.reports[band]
            logger.record(
                (case.deployment.value, case.num_nodes, band),
                pdr=report.pdr,
                mean_latency_s=report.mean_latency,
                total_retries=report.total_retries,
                mean_retries_per_node=float(report.mean_retries_per_node),
                mean_hops=report.mean_hops,
                unjoined_nodes=report.unjoined_nodes,
            )

    result = ExperimentResult(digest, cases, failures, logger)
    write_results(spec, result)
    return result


def write_results(spec: ExperimentSpec, result: ExperimentResult) -> None:
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = result.spec_hash

    for case in result.cases:
        seed = _seed_label(case.seed)
        for band, trace in case.traces.items():
            write_trace(trace, out / f"trace_{band.value}_{case.name}_{seed}.txt", digest)
        write_metrics_json([case.reports[b] for b in REPORT_BANDS], out / f"metrics_{case.name}_{seed}.json", digest)

    _write_csv(
        out / "aggregate.csv", digest, "aggregate",
        ["deployment", "nodes", "band", "metric", "median", "q25", "q75", "count"],
        ([*group, metric, *stats] for group, metric, *stats in result.logger.rows()),
    )
    _write_csv(
        out / "failures.csv", digest, "failures",
        ["deployment", "nodes", "seed", "error"],
        ([f.deployment.value, f.num_nodes, _seed_label(f.seed), f.error] for f in result.failures),
    )
    write_parameter_table(spec, out / "table_parameters.csv", digest)
    write_retry_table(result.cases, out / "table_retries.csv", digest)
    emit_plot_data(spec, result, out / "plots")


def write_parameter_table(spec: ExperimentSpec, path: Path, digest: str) -> None:
    app = spec.app
    rows = [
        ("deployments", " ".join(d.value for d in spec.deployments)),
        ("node_counts", " ".join(str(n) for n in spec.node_counts)),
        ("area_m", f"{spec.side_length!r}x{spec.side_length!r}"),
        ("message_interval_s", app.message_interval),
        ("interval_variance_s", app.interval_variance),
        ("max_retransmissions", app.max_retransmissions),
        ("setup_time_s", app.setup_time),
        ("duration_s", app.duration),
        ("payload_bytes", app.payload_size),
        ("seeds", " ".join(_seed_label(s) for s in spec.seeds)),
        ("slotframe_length", spec.mac.slotframe_length),
        ("queue_capacity", spec.mac.queue_capacity),
    ]
    for band in spec.bands:
        label = band.band_id.value
        rows.extend([
            (f"{label}_channels", band.channel_count),
            (f"{label}_bitrate_bps", band.bitrate),
            (f"{label}_slot_duration_us", band.slot_duration_us),
            (f"{label}_sensitivity_dbm", band.radio_sensitivity),
        ])
    _write_csv(path, digest, "parameters", ["parameter", "value"], rows)


def write_retry_table(cases: Sequence[CaseResult], path: Path, digest: str) -> None:
    header = ["deployment", "nodes", "seed"]
    for band in REPORT_BANDS:
        header.extend([f"{band}_total", f"{band}_per_node"])
    rows = []
    for case in cases:
        row = [case.deployment.value, case.num_nodes, _seed_label(case.seed)]
        for band in REPORT_BANDS:
            report = case.reports[band]
            row.extend([report.total_retries, str(report.mean_retries_per_node)])
        rows.append(row)
    _write_csv(path, digest, "retries", header, rows)


def latency_cdf_series(case: CaseResult, resolution_us: int = CDF_RESOLUTION_US) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """
    The 2.4 GHz, 868 MHz and combined latency CDFs sampled on one shared time axis.

    :return (time axis in microseconds, {band: cumulative probability at each axis point})
    """
    latencies = {
        BandId.BAND_24GHZ.value: [r.latency for r in case.traces[BandId.BAND_24GHZ].records if r.delivered],
        BandId.BAND_868MHZ.value: [r.latency for r in case.traces[BandId.BAND_868MHZ].records if r.delivered],
        COMBINED: [o.latency for o in case.outcomes if o.delivered_any],
    }
    longest = max((max(v) for v in latencies.values() if v), default=0)
    axis = np.arange(0, longest + resolution_us, resolution_us, dtype=np.int64)
    series = {}
    for band, values in latencies.items():
        ordered = np.sort(np.asarray(values, dtype=np.int64))
        if ordered.size == 0:
            series[band] = np.zeros(axis.shape)
        else:
            series[band] = np.searchsorted(ordered, axis, side="right") / ordered.size
    return axis, series


def emit_plot_data(spec: ExperimentSpec, result: ExperimentResult, plot_dir: Path) -> None:
    """
    CSV series for plotting: PDR and mean latency against network size per deployment (one row per node count and
    band), latency CDFs of every case, and the per-node winning band with node positions.
    """
    plot_dir.mkdir(parents=True, exist_ok=True)
    digest = result.spec_hash

    for deployment in spec.deployments:
        for metric, name in (("pdr", "pdr_vs_size"), ("mean_latency_s", "latency_vs_size")):
            rows = []
            for band in REPORT_BANDS:
                for n in spec.node_counts:
                    stats = result.logger.summary((deployment.value, n, band), metric)
                    rows.append([band, n, *(("", "", "", 0) if stats is None else stats)])
            _write_csv(plot_dir / f"{name}_{deployment.value}.csv", digest, name,
                       ["band", "nodes", "median", "q25", "q75", "count"], rows)

    for case in result.cases:
        seed = _seed_label(case.seed)
        axis, series = latency_cdf_series(case)
        _write_csv(
            plot_dir / f"latency_cdf_{case.name}_{seed}.csv", digest, "latency_cdf",
            ["latency_s", *REPORT_BANDS],
            ([f"{t / 1e6:.2f}", *(repr(float(series[b][i])) for b in REPORT_BANDS)] for i, t in enumerate(axis)),
        )
        rows = []
        for node_id, position in enumerate(case.topology.positions):
            if node_id == 0:
                label = "root"
            else:
                winner = case.winners.get(node_id)
                label = "unclassified" if winner is None else winner.value
            rows.append([node_id, repr(position.x), repr(position.y), label])
        _write_csv(plot_dir / f"winning_band_{case.name}_{seed}.csv", digest, "winning_band",
                   ["node", "x", "y", "band"], rows)
