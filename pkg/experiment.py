""" Experiment configuration, orchestration and persistence

    A run directory holds:

    config.ini                the resolved configuration (floats in repr form, so it reads back bit-exact)
    initial.fld               the initial data a
    smallness.json            smallness conditions at the chosen radius
    synthesis.json            outer loop history, moment matrices, beta
    reports.json              every diagnostic report selected in the config
    trajectories/unforced/    node containers of the run without force
    trajectories/forced/      node containers of the synthesized run
    force/                    tensor containers of the synthesized force at the profile lattice times
    export/                   CSV series and summary.json (export_report)
    manifest.json             config hash, blake3 of every other file, versions, timings, step counts

    While a run is in progress checkpoints/ holds the integrator checkpoints and the synthesis state, so a
    killed run resumes where it stopped.  The directory is removed once the run completes.
"""

import configparser
import csv
import io
import json
import logging
import math
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import blake3
import cbor2
import jsonschema
import numpy as np
import scipy

from diagnostics import (WindowError, decay_check, flux_matrix_series, fm_profile_residual, force_symmetry,
                         kernel_norm_exponents, l2_series, lemma_heat2_check, linear_deviation, ms_residual,
                         rapid_dissipation, wiegner_check)
from fieldio import TrajectoryCheckpoint, read_field, write_field
from force_synthesis import (CALIBRATION_PATH, Calibration, ForceProfile, MomentMatrix, ProfileForcing,
                             asymmetric_profile, build_force, check_smallness, choose_R, default_profile,
                             export_force, l2_time_bound, lambda_rescale, load_calibration, profile_from_samples,
                             refined_rescale, synthesize, unscale_force, unscale_trajectory)
from initial_data import generate_data
from mild_solver import (PicardConfig, SmallnessViolation, TimeGrid, Trajectory, contraction_ratios, integrate,
                         kato_norms, measure_bilinear_constant, picard_iterate)
from spectral_core import GridSpec, PHYSICAL, VectorField, heat_hat, lp_norm
from utils import get_system_info, get_system_stats

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SCHEMA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "schema")
CONFIG_SCHEMA = os.path.join(SCHEMA_DIR, "config.schema.json")
REPORT_SCHEMA = os.path.join(SCHEMA_DIR, "report.schema.json")
DECAY_HEADER = ["t", "l2", "weighted_l2"]
SERIES_HEADER = ["t", "value", "weighted_value"]
ORACLE_TOLERANCE = 1e-6
CONTRACTION_LIMIT = 0.5
WIEGNER_REFINEMENT = 2
DIAGNOSTICS = ("decay", "kato", "ms", "profile", "heat_lemma", "wiegner", "rapid", "flux", "symmetry",
               "kernel_norms", "bilinear")

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "grid": {"dim": 2, "points": 128, "box_length": 32.0, "dealias_fraction": 2.0 / 3.0},
    "data": {"kind": "gaussian_vortex", "amplitude": 0.05, "width": 1.0, "skew": 0.0, "seed": 0},
    "profile": {"source": "bump", "path": "", "time_extent": 0.25, "radius": 1.0, "auto_radius": True,
                "rescale": 1.0},
    "solver": {"method": "picard", "spacing": "geometric", "t_end": 16.0, "steps": 0, "t_min": 1e-3,
               "ratio": 1.2, "max_step": 0.0},
    "solver.picard": {"max_iterations": 50, "tolerance": 1e-10},
    "synthesis": {"enabled": True, "tol": 1e-6, "max_outer": 25, "horizon_tolerance": 1e-3,
                  "acknowledge_smallness": False},
    "diagnostics": {"select": ",".join(DIAGNOSTICS[:9]), "q": 2.0},
    "calibration": {"path": ""},
    "output": {"directory": "runs/default", "compressed": True},
}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _parse(text: str, default: Any, where: str) -> Any:
    try:
        if isinstance(default, bool):
            lowered = text.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ValueError(f"{where}: cannot read {text!r} as {type(default).__name__}")
    return text.strip()


class ExperimentConfig:
    """ Sections of typed values, read from and written to INI text.

        Section names are dotted for nesting ([solver.picard]).  Every key has a default; unknown
        sections and keys are errors.
    """

    def __init__(self, values: Optional[Dict[str, Dict[str, Any]]] = None):
        merged = {section: dict(keys) for section, keys in DEFAULTS.items()}
        for section, keys in (values or {}).items():
            if section not in DEFAULTS:
                raise ValueError(f"unknown config section [{section}]")
            for key, value in keys.items():
                if key not in DEFAULTS[section]:
                    raise ValueError(f"unknown config key {section}.{key}")
                default = DEFAULTS[section][key]
                if isinstance(value, str) and not isinstance(default, str):
                    value = _parse(value, default, f"{section}.{key}")
                elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                    value = float(value)
                merged[section][key] = value
        self.values = merged
        self.validate()

    def validate(self):
        with open(CONFIG_SCHEMA) as f:
            schema = json.load(f)
        try:
            jsonschema.validate(self.values, schema)
        except jsonschema.ValidationError as e:
            where = ".".join(str(p) for p in e.absolute_path)
            raise ValueError(f"invalid config at {where or 'top level'}: {e.message}") from e
        unknown = set(self.diagnostics) - set(DIAGNOSTICS)
        if unknown:
            raise ValueError(f"unknown diagnostics {sorted(unknown)}, expected a subset of {DIAGNOSTICS}")

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.values[section]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    @classmethod
    def from_string(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        return cls({section: dict(parser[section]) for section in parser.sections()})

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise FileNotFoundError(f"config {path} not found")
        with open(path) as f:
            return cls.from_string(f.read())

    def to_string(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, keys in self.values.items():
            parser[section] = {key: _format(value) for key, value in keys.items()}
        out = io.StringIO()
        parser.write(out)
        return out.getvalue()

    def write(self, path: str):
        with open(path, "w") as f:
            f.write(self.to_string())

    def with_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        """Apply section.key=value assignments; the section part may itself be dotted."""
        values = {section: dict(keys) for section, keys in self.values.items()}
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not of the form section.key=value")
            name, text = item.split("=", 1)
            section, _, key = name.strip().rpartition(".")
            if not section:
                raise ValueError(f"override {item!r} names no section")
            values.setdefault(section, {})[key] = text
        return ExperimentConfig(values)

    def with_values(self, **assignments: Any) -> "ExperimentConfig":
        """with_values(data__amplitude=0.1) sets data.amplitude; double underscores separate the section."""
        values = {section: dict(keys) for section, keys in self.values.items()}
        for name, value in assignments.items():
            section, key = name.replace("__", ".").rsplit(".", 1)
            values.setdefault(section, {})[key] = value
        return ExperimentConfig(values)

    def to_dict(self) -> dict:
        return {section: dict(keys) for section, keys in self.values.items()}

    def hash(self) -> str:
        """blake3 of the canonical CBOR encoding, output directory excluded."""
        values = self.to_dict()
        values["output"] = {k: v for k, v in values["output"].items() if k != "directory"}
        return blake3.blake3(cbor2.dumps(values, canonical=True)).hexdigest()

    @property
    def directory(self) -> str:
        return self["output"]["directory"]

    @property
    def diagnostics(self) -> List[str]:
        return [name.strip() for name in self["diagnostics"]["select"].split(",") if name.strip()]

    def grid(self) -> GridSpec:
        g = self["grid"]
        return GridSpec(g["dim"], g["points"], g["box_length"], g["dealias_fraction"])

    def timegrid(self) -> TimeGrid:
        s = self["solver"]
        if s["spacing"] == "uniform":
            return TimeGrid.uniform(s["t_end"], s["steps"])
        return TimeGrid(s["t_end"], s["steps"], "geometric", s["ratio"], s["t_min"])

    def picard(self) -> PicardConfig:
        p = self["solver.picard"]
        return PicardConfig(max_iterations=p["max_iterations"], tolerance=p["tolerance"])

    def max_step(self) -> Optional[float]:
        return self["solver"]["max_step"] or None

    def calibration(self) -> Calibration:
        return load_calibration(self["grid"]["dim"], self["calibration"]["path"] or CALIBRATION_PATH)

    def profile(self) -> ForceProfile:
        p = self["profile"]
        dim = self["grid"]["dim"]
        if p["source"] == "bump":
            profile = default_profile(dim, p["time_extent"])
        elif p["source"] == "asymmetric":
            profile = asymmetric_profile(dim, p["time_extent"])
        else:
            profile = profile_from_samples(p["path"])
        return profile.with_radius(p["radius"])

    def initial_data(self) -> VectorField:
        d = self["data"]
        return generate_data(self.grid(), d["kind"], d["amplitude"], d["width"], d["skew"], d["seed"])


@dataclass
class RunManifest:
    directory: str
    config_hash: str
    artifacts: Dict[str, str] = field(default_factory=dict)
    versions: Dict[str, Any] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)
    wall_clock: float = 0.0
    created: float = 0.0
    system: Dict[str, Any] = field(default_factory=dict)

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def to_dict(self) -> dict:
        return {"format": FORMAT_VERSION, "config_hash": self.config_hash, "artifacts": self.artifacts,
                "versions": self.versions, "steps": self.steps, "wall_clock": self.wall_clock,
                "created": self.created, "system": self.system}

    def comparable(self) -> dict:
        """The manifest without timings and process statistics."""
        d = self.to_dict()
        for key in ("wall_clock", "created", "system"):
            d.pop(key)
        return d

    def write(self):
        with open(self.path("manifest.json"), "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, directory: str) -> "RunManifest":
        path = os.path.join(directory, "manifest.json")
        if not os.path.exists(path):
            raise FileNotFoundError(f"no manifest in {directory}")
        with open(path) as f:
            d = json.load(f)
        return cls(directory, d["config_hash"], d["artifacts"], d["versions"], d["steps"], d["wall_clock"],
                   d["created"], d["system"])

    def refresh(self):
        """Hash every file in the run directory except the manifest itself."""
        self.artifacts = {}
        for root, _, files in os.walk(self.directory):
            for name in sorted(files):
                full = os.path.join(root, name)
                relative = os.path.relpath(full, self.directory)
                if relative != "manifest.json":
                    self.artifacts[relative] = _file_hash(full)
        self.artifacts = dict(sorted(self.artifacts.items()))

    def verify(self) -> List[str]:
        """Artifacts that are missing or whose hash changed."""
        bad = []
        for relative, digest in self.artifacts.items():
            full = self.path(relative)
            if not os.path.exists(full) or _file_hash(full) != digest:
                bad.append(relative)
        return bad


def _file_hash(path: str) -> str:
    hasher = blake3.blake3()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def _write_json(path: str, data: dict):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _store_trajectory(tr: Trajectory, directory: str, compressed: bool):
    if os.path.exists(directory):
        shutil.rmtree(directory)
    with TrajectoryCheckpoint(directory, tr.grid, compressed) as store:
        for i, t in enumerate(tr.times):
            store.append(float(t), tr.snapshot(i), {"l2": float(tr.l2[i])})


def _load_trajectory(directory: str, timegrid: TimeGrid) -> Trajectory:
    index = os.path.join(directory, "index.json")
    if not os.path.exists(index):
        raise FileNotFoundError(f"no stored trajectory in {directory}")
    with open(index) as f:
        grid = GridSpec(**json.load(f)["grid"])
    store = TrajectoryCheckpoint(directory, grid)
    nodes = store.load()
    if len(nodes) != len(timegrid.nodes):
        raise ValueError(f"{directory} holds {len(nodes)} nodes, the time grid has {len(timegrid.nodes)}")
    return Trajectory(grid, timegrid, np.stack([f.spectral().data for _, f in nodes]))


def solve(a: VectorField, force, cfg: ExperimentConfig, checkpoint: Optional[str] = None,
          timegrid: Optional[TimeGrid] = None) -> Tuple[Trajectory, List[float]]:
    """One flow solve with the configured method; returns the trajectory and the Picard history.

    A timegrid other than the configured one scales max_step with it.
    """
    configured = cfg.timegrid()
    timegrid = timegrid or configured
    max_step = cfg.max_step()
    if max_step is not None:
        max_step *= timegrid.t_end / configured.t_end
    if cfg["solver"]["method"] == "picard":
        return picard_iterate(a, force, timegrid, cfg.picard())
    return integrate(a, force, timegrid, max_step=max_step, checkpoint=checkpoint), []


@dataclass
class RunResult:
    """Everything a diagnostics pass needs, on the physical (unscaled) box."""
    config: ExperimentConfig
    data: VectorField
    unforced: Trajectory
    forced: Optional[Trajectory] = None
    force: Optional[ProfileForcing] = None
    moments: Optional[MomentMatrix] = None
    calibration: Optional[Calibration] = None


def _trivial(name: str) -> dict:
    return {"name": name, "trivial": True, "passed": True}


def run_diagnostics(result: RunResult) -> Dict[str, dict]:
    """Reports for the diagnostics selected in the config, keyed by name."""
    cfg = result.config
    a, unforced, forced = result.data, result.unforced, result.forced
    run = forced if forced is not None else unforced
    calibration = result.calibration or cfg.calibration()
    selected = cfg.diagnostics
    reports: Dict[str, dict] = {}
    series = {"unforced_l2": l2_series(unforced).to_dict()}
    if forced is not None:
        series["forced_l2"] = l2_series(forced).to_dict()
        series["linear_deviation"] = linear_deviation(forced, a, cfg["diagnostics"]["q"]).to_dict()
    reports["series"] = series

    if a.max_abs() == 0:
        for name in selected:
            reports[name] = _trivial(name)
        return reports

    for name in selected:
        try:
            reports[name] = _diagnostic(name, result, run, calibration)
        except WindowError as e:
            logger.warning(f"diagnostic {name} skipped: {e}")
            reports[name] = {"name": name, "skipped": str(e), "passed": False}
    return reports


def _diagnostic(name: str, result: RunResult, run: Trajectory, calibration: Calibration) -> dict:
    cfg = result.config
    a, unforced, forced = result.data, result.unforced, result.forced
    q = cfg["diagnostics"]["q"]
    if name == "decay":
        runs = {"unforced": unforced} if forced is None else {"unforced": unforced, "forced": forced}
        return decay_check(a, runs).to_dict()
    if name == "kato":
        report = kato_norms(run, a).to_dict()
        report["passed"] = bool(report.get("energy_bound_ratio", 0.0) <= 1.0)
        return report
    if name == "ms":
        if result.moments is None:
            return {"name": name, "skipped": "no synthesized force", "passed": False}
        return ms_residual(result.moments, result.force, 10 * cfg["synthesis"]["tol"]).to_dict()
    if name == "profile":
        report = fm_profile_residual(run, a, result.force, q, result.moments)
        d = report.to_dict()
        d["decreasing"] = report.decreasing_over_last_decade()
        d["passed"] = d["decreasing"]
        return d
    if name == "heat_lemma":
        valid = [float(t) for t in run.times[run.valid_mask()] if t > 0]
        return lemma_heat2_check(a, valid).to_dict()
    if name == "wiegner":
        fine = refined_rescale(a, WIEGNER_REFINEMENT)
        rescaled, _ = solve(fine, None, cfg, timegrid=unforced.timegrid.scaled(WIEGNER_REFINEMENT ** -2))
        return wiegner_check(unforced, a, calibration, (rescaled, fine)).to_dict()
    if name == "rapid":
        if forced is None:
            return {"name": name, "skipped": "no synthesized force", "passed": False}
        return rapid_dissipation(forced, unforced, a).to_dict()
    if name == "flux":
        report = flux_matrix_series(run).to_dict()
        report["passed"] = True
        return report
    if name == "symmetry":
        if result.force is None:
            return _trivial(name)
        asymmetry = force_symmetry(result.force)
        return {"asymmetry": asymmetry, "passed": asymmetry <= 1e-12}
    if name == "kernel_norms":
        report = kernel_norm_exponents(run.grid).to_dict()
        report["passed"] = all(e <= 0.01 for e in report["relative_errors"].values())
        return report
    if name == "bilinear":
        return {"kappa": measure_bilinear_constant(run), "l2_time_constant": l2_time_bound(run, a, calibration),
                "passed": True}
    raise ValueError(f"unknown diagnostic {name!r}")


def run_experiment(cfg: ExperimentConfig, synthesize_force: Optional[bool] = None) -> RunManifest:
    """generate -> smallness -> (rescale, radius) -> solve -> synthesize -> diagnostics -> reports."""
    started = time.time()
    directory = cfg.directory
    os.makedirs(directory, exist_ok=True)
    checkpoints = os.path.join(directory, "checkpoints")
    os.makedirs(checkpoints, exist_ok=True)
    cfg.write(os.path.join(directory, "config.ini"))
    compressed = cfg["output"]["compressed"]
    synthesize_force = cfg["synthesis"]["enabled"] if synthesize_force is None else synthesize_force
    logger.info(f"run {directory}: config {cfg.hash()[:16]}")

    calibration = cfg.calibration()
    a = cfg.initial_data()
    write_field(os.path.join(directory, "initial.fld"), a, {"kind": cfg["data"]["kind"]}, overwrite=True)

    lam = cfg["profile"]["rescale"]
    a_run = lambda_rescale(a, lam)
    profile = cfg.profile()
    if cfg["profile"]["auto_radius"]:
        profile, smallness = choose_R(a_run, profile, calibration)
    else:
        profile.check_fits(a.grid)
        smallness = check_smallness(a_run, profile, calibration)
    smallness_report = smallness.to_dict()
    smallness_report["rescale"] = lam
    _write_json(os.path.join(directory, "smallness.json"), smallness_report)
    logger.info(f"smallness at R={profile.radius:g}: passed {smallness.passed}, binding {smallness.binding}")

    steps = {"nodes": len(cfg.timegrid().nodes)}
    unforced, history = solve(a_run, None, cfg, os.path.join(checkpoints, "unforced"))
    steps["picard_iterations"] = len(history)

    forced = force = moments = None
    if synthesize_force:
        state = synthesize(a_run, profile, cfg.timegrid(), cfg["synthesis"]["tol"], cfg["synthesis"]["max_outer"],
                           cfg.picard(), cfg["solver"]["method"], cfg["synthesis"]["horizon_tolerance"],
                           calibration, cfg["synthesis"]["acknowledge_smallness"],
                           os.path.join(checkpoints, "synthesis.cbor"), cfg.max_step())
        steps["outer_iterations"] = state.m
        synthesis_report = state.to_dict()
        synthesis_report["rescale"] = lam
        _write_json(os.path.join(directory, "synthesis.json"), synthesis_report)
        forced, force = state.trajectory, state.force
        c = state.final
        moments = MomentMatrix(c.entries * lam ** a.grid.dim, c.t_cut * lam ** 2, c.tail_bound * lam ** a.grid.dim)

    if lam != 1:
        unforced = unscale_trajectory(unforced, lam)
        forced = unscale_trajectory(forced, lam) if forced is not None else None
        force = unscale_force(force, lam) if force is not None else None
        a_run = VectorField(unforced.grid, a_run.physical().data / lam, PHYSICAL)
    else:
        a_run = a

    _store_trajectory(unforced, os.path.join(directory, "trajectories", "unforced"), compressed)
    if forced is not None:
        _store_trajectory(forced, os.path.join(directory, "trajectories", "forced"), compressed)
        force_dir = os.path.join(directory, "force")
        if os.path.exists(force_dir):
            shutil.rmtree(force_dir)
        export_force(force, force_dir, compressed)

    result = RunResult(cfg, a_run, unforced, forced, force, moments, calibration)
    _write_json(os.path.join(directory, "reports.json"), run_diagnostics(result))
    shutil.rmtree(checkpoints)

    manifest = RunManifest(directory, cfg.hash(), steps=steps, created=started,
                           versions={"format": FORMAT_VERSION, "numpy": np.__version__, "scipy": scipy.__version__,
                                     "calibration": calibration.version})
    export_report(manifest)
    manifest.refresh()
    manifest.wall_clock = time.time() - started
    manifest.system = {"info": get_system_info(), "stats": get_system_stats()}
    manifest.write()
    logger.info(f"run {directory} finished in {manifest.wall_clock:.1f}s, {len(manifest.artifacts)} artifacts")
    return manifest


def load_run(directory: str) -> RunResult:
    """Rebuild the stored run of a completed directory for a fresh diagnostics pass."""
    cfg = ExperimentConfig.from_file(os.path.join(directory, "config.ini"))
    lam = cfg["profile"]["rescale"]
    timegrid = cfg.timegrid().scaled(lam ** 2) if lam != 1 else cfg.timegrid()
    unforced = _load_trajectory(os.path.join(directory, "trajectories", "unforced"), timegrid)
    a, _ = read_field(os.path.join(directory, "initial.fld"))
    if lam != 1:
        a = VectorField(unforced.grid, lambda_rescale(a, lam).physical().data / lam, PHYSICAL)
    forced = force = moments = None
    forced_dir = os.path.join(directory, "trajectories", "forced")
    if os.path.exists(forced_dir):
        forced = _load_trajectory(forced_dir, timegrid)
        with open(os.path.join(directory, "synthesis.json")) as f:
            synthesis = json.load(f)
        c = MomentMatrix.from_dict(synthesis["c_history"][-1])
        profile = cfg.profile().with_radius(synthesis["profile"]["radius"])
        force = build_force(c, profile, cfg.grid())
        if lam != 1:
            force = unscale_force(force, lam)
        n = cfg["grid"]["dim"]
        moments = MomentMatrix(c.entries * lam ** n, c.t_cut * lam ** 2, c.tail_bound * lam ** n)
    return RunResult(cfg, a, unforced, forced, force, moments)


def diagnose(directory: str) -> RunManifest:
    """Recompute reports.json from the stored run and re-export."""
    manifest = RunManifest.load(directory)
    _write_json(os.path.join(directory, "reports.json"), run_diagnostics(load_run(directory)))
    export_report(manifest)
    manifest.refresh()
    manifest.write()
    return manifest


def _write_csv(path: str, header: Sequence[str], rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def _series_rows(series: dict):
    return zip(series["times"], series["values"], series["weighted"])


def export_report(manifest: RunManifest) -> List[str]:
    """CSV series and summary.json under export/; byte-identical when repeated."""
    directory = manifest.directory
    needed = ["config.ini", "reports.json", "smallness.json"]
    missing = [name for name in needed if not os.path.exists(os.path.join(directory, name))]
    if missing:
        raise FileNotFoundError(f"run {directory} is missing {missing}")
    with open(os.path.join(directory, "reports.json")) as f:
        reports = json.load(f)
    with open(os.path.join(directory, "smallness.json")) as f:
        smallness = json.load(f)
    synthesis = None
    if os.path.exists(os.path.join(directory, "synthesis.json")):
        with open(os.path.join(directory, "synthesis.json")) as f:
            synthesis = json.load(f)

    out = os.path.join(directory, "export")
    os.makedirs(out, exist_ok=True)
    paths = []
    series = reports["series"]
    for name in ("unforced_l2", "forced_l2"):
        if name in series:
            path = os.path.join(out, f"decay_{name.split('_')[0]}.csv")
            _write_csv(path, DECAY_HEADER, _series_rows(series[name]))
            paths.append(path)
    if "linear_deviation" in series:
        path = os.path.join(out, "linear_deviation.csv")
        _write_csv(path, SERIES_HEADER, _series_rows(series["linear_deviation"]))
        paths.append(path)

    diagnostics = {name: report for name, report in reports.items() if name != "series"}
    summary = {
        "format": FORMAT_VERSION,
        "config_hash": manifest.config_hash,
        "smallness": {"passed": smallness["passed"], "binding": smallness["binding"], "radius": smallness["radius"]},
        "synthesis": None if synthesis is None else {
            "converged": synthesis["converged"], "contracting": synthesis["contracting"],
            "outer_iterations": synthesis["m"], "ratios": synthesis["ratios"], "beta": synthesis["beta"]},
        "diagnostics": {name: {"passed": bool(report.get("passed", False))} for name, report in diagnostics.items()},
        "series": sorted(series),
    }
    for name, report in diagnostics.items():
        if name == "decay":
            summary["diagnostics"][name]["exponents"] = {k: v["exponent"] for k, v in report.items()
                                                        if isinstance(v, dict) and "exponent" in v}
        if "skipped" in report:
            summary["diagnostics"][name]["skipped"] = report["skipped"]
    with open(REPORT_SCHEMA) as f:
        jsonschema.validate(summary, json.load(f))
    path = os.path.join(out, "summary.json")
    _write_json(path, summary)
    paths.append(path)
    return paths


def sweep(cfg: ExperimentConfig, key: str, values: Sequence[Any], workers: Optional[int] = None) -> Dict[Any, Optional[RunManifest]]:
    """One run per value of section.key, each in its own directory under the configured one."""
    base = cfg.directory
    configs = {}
    for value in values:
        name = f"{key}={_format(value)}"
        configs[value] = cfg.with_overrides([f"{key}={_format(value)}", f"output.directory={os.path.join(base, name)}"])

    results: Dict[Any, Optional[RunManifest]] = {}
    rows = []
    with ThreadPoolExecutor(max_workers=workers or len(configs)) as executor:
        future_to_value = {executor.submit(run_experiment, c): value for value, c in configs.items()}
        for future in as_completed(future_to_value):
            value = future_to_value[future]
            try:
                results[value] = future.result()
                status = "ok"
            except Exception as exc:
                logger.error(f"{key}={value} generated an exception: {exc}")
                results[value] = None
                status = type(exc).__name__
            rows.append((value, status))

    os.makedirs(base, exist_ok=True)
    with open(os.path.join(base, "sweep.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([key, "status"])
        for value, status in sorted(rows, key=lambda r: r[0]):
            writer.writerow([_format(value), status])
    return {value: results[value] for value in values}


def _relative_l2(grid: GridSpec, u: np.ndarray, v: np.ndarray) -> float:
    diff = lp_norm(grid, np.sqrt(np.sum(grid.inverse(u - v) ** 2, axis=0)), 2.0)
    scale = lp_norm(grid, np.sqrt(np.sum(grid.inverse(v) ** 2, axis=0)), 2.0)
    return diff / scale if scale > 0 else diff


def oracle(cfg: ExperimentConfig) -> dict:
    """Cross-checks: Picard against the ETD integrator, the linear integrator against the exact heat flow, and
    for a 2D Gaussian vortex the heat flow against sqrt(pi) A w^2 / (w^2 + 4t)."""
    a = cfg.initial_data()
    grid = a.grid
    timegrid = cfg.timegrid()
    picard, _ = picard_iterate(a, None, timegrid, cfg.picard())
    marched = integrate(a, None, timegrid, max_step=cfg.max_step())
    picard_vs_integrate = max(_relative_l2(grid, marched.spectra[i], picard.spectra[i]) for i in range(len(timegrid.nodes)))

    linear = integrate(a, None, timegrid, nonlinear=False)
    a_hat = a.spectral().data
    heat = np.stack([heat_hat(grid, a_hat, float(t)) for t in timegrid.nodes])
    linear_vs_heat = max(_relative_l2(grid, linear.spectra[i], heat[i]) for i in range(len(timegrid.nodes)))

    report = {"picard_vs_integrate": picard_vs_integrate, "linear_vs_heat": linear_vs_heat,
              "tolerance": ORACLE_TOLERANCE}
    d = cfg["data"]
    if grid.dim == 2 and d["kind"] == "gaussian_vortex":
        exact = math.sqrt(math.pi) * abs(d["amplitude"]) * d["width"] ** 2 / (d["width"] ** 2 + 4 * timegrid.nodes)
        computed = np.array([lp_norm(grid, np.sqrt(np.sum(grid.inverse(h) ** 2, axis=0)), 2.0) for h in heat])
        valid = timegrid.nodes <= grid.window_time
        scale = np.where(exact > 0, exact, 1.0)
        report["analytic_heat"] = float(np.max(np.abs(computed - exact)[valid] / scale[valid]))
    report["passed"] = picard_vs_integrate <= ORACLE_TOLERANCE and linear_vs_heat <= ORACLE_TOLERANCE
    logger.info(f"oracle: picard vs integrate {picard_vs_integrate:.3e}, linear vs heat {linear_vs_heat:.3e}")
    return report


def calibrate(cfg: ExperimentConfig, amplitudes: Sequence[float], path: str) -> Calibration:
    """Amplitude sweep of the unforced Picard solve.

    gamma becomes the largest measured L2-in-time constant, delta the largest ||a||_n whose Picard
    ratios stay at or below 0.5.  The other constants are carried over; the version is incremented.
    """
    base = cfg.calibration()
    n = base.dim
    gamma = 0.0
    delta = 0.0
    rows = []
    for amplitude in sorted(amplitudes):
        run_cfg = cfg.with_values(data__amplitude=float(amplitude))
        a = run_cfg.initial_data()
        a_n = lp_norm(a.grid, a.magnitude(), float(n))
        try:
            tr, history = picard_iterate(a, None, run_cfg.timegrid(), run_cfg.picard())
        except SmallnessViolation as e:
            logger.info(f"amplitude {amplitude:g}: no contraction ({e})")
            rows.append({"amplitude": amplitude, "a_n": a_n, "max_ratio": math.inf})
            continue
        ratios = contraction_ratios(history)
        worst = max(ratios) if ratios else 0.0
        if a_n > 0:
            gamma = max(gamma, l2_time_bound(tr, a, base))
        if worst <= CONTRACTION_LIMIT:
            delta = max(delta, a_n)
        rows.append({"amplitude": amplitude, "a_n": a_n, "max_ratio": worst})
        logger.info(f"amplitude {amplitude:g}: ||a||_{n} {a_n:.4g}, worst ratio {worst:.3f}")

    if gamma == 0 or delta == 0:
        raise ValueError(f"calibration sweep over {list(amplitudes)} produced no contracting nonzero run")
    with open(cfg["calibration"]["path"] or CALIBRATION_PATH) as f:
        data = json.load(f)
    data["version"] = int(data["version"]) + 1
    constants = dict(data["dimensions"][str(n)])
    constants.update({"gamma": gamma, "delta": delta})
    data["dimensions"][str(n)] = constants
    data.setdefault("history", []).append({"version": data["version"], "dim": n, "sweep": rows})
    _write_json(path, data)
    logger.info(f"calibration version {data['version']} written to {path}: gamma {gamma:.4g}, delta {delta:.4g}")
    return load_calibration(n, path)
