"""End-to-end experiment driver.

Stages: excite the plant and record data, train the window model, tune the
controller per setpoint, run the closed loop for the proposed controller
and the disturbance-estimation baseline, and reduce traces to metrics.
Every stage writes its artifacts into one run directory and is skipped
when they already exist, so a rerun resumes from the cache.

All controller mathematics runs in normalized units; conversion to
physical units happens only at the plant boundary and in the logs.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plant as plant_mod
from .augmentation import lift_equilibrium
from .debmpc import DebMpcController, MheConfig
from .mpc import MpcConfig, MpcController, MpcWeights
from .nnarx import (InputBox, NnarxModel, load_model, output, save_model,
                    step)
from .plant import (DEFAULT_INPUT_BOX, DisturbanceProfile, PlantParams,
                    equilibrium, open_loop_experiment)
from .training import (Dataset, IoSequence, TrainConfig, evaluate_fit,
                       extract_subsequences, generate_mprs, init_params,
                       make_model, train)

log = logging.getLogger(__name__)


DEFAULT_CONFIG = {
    "seed": 0,
    "tau_s": 120.0,
    "plant": {
        "params": {},
        "substeps": 32,
        "input_box": [0.05, 0.18],
        "initial_input": 0.1,
    },
    "data": {
        "levels": 8,
        "dwell": [10, 50],
        "train_steps": 2500,
        "val_steps": 1200,
        "test_steps": 500,
        "subsequence_length": 400,
        "train_count": 120,
        "val_count": 30,
        "test_count": 1,
        "noise_std": 0.0,
    },
    "model": {"N": 5, "hidden": [30]},
    "train": {
        "learning_rate": 1e-3,
        "max_epochs": 2000,
        "patience": 200,
        "penalty_weight": 0.1,
        "margin_target": 0.95,
        "batch_size": 40,
    },
    "controller": {
        "horizon": 50,
        "control_horizon": None,
        "terminal_tol": 1e-6,
        "mu_tilde": None,
        "mu_tilde_ratio": 0.56,
        "weights": {"R_e": 10.0, "R_u": 0.1, "Q_xi": 1.0, "Q_theta": 1e-5},
    },
    "debmpc": {"window": 20, "residual_weight": 1.0, "prior_weight": 1.0},
    "scenario": {
        "references": [[0.0, 320.0], [18000.0, 327.0], [54000.0, 317.0]],
        "disturbance_w": [[0.0, 1.0], [36000.0, 1.15]],
        "disturbance_Ti": [[0.0, 298.0], [72000.0, 293.0]],
        "duration_steps": 750,
    },
    "metrics": {"settling_band": 0.1},
}


def merge_config(overrides: dict | None) -> dict:
    def merge(base, over):
        out = copy.deepcopy(base)
        for key, value in (over or {}).items():
            if isinstance(value, dict) and isinstance(out.get(key), dict):
                out[key] = merge(out[key], value)
            else:
                out[key] = copy.deepcopy(value)
        return out

    return merge(DEFAULT_CONFIG, overrides)


def load_config(path) -> dict:
    with open(path) as fh:
        return merge_config(json.load(fh))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def write_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, default=_json_default, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Plant adapters


class OdePlant:
    """Ground-truth simulator behind the sampled interface the loop sees."""

    def __init__(self, params: PlantParams, profile: DisturbanceProfile,
                 x0, tau_s: float, substeps: int, box: InputBox):
        self.params = params
        self.profile = profile
        self.x = np.asarray(x0, float).copy()
        self.tau_s = tau_s
        self.substeps = substeps
        self.box = box

    def output(self) -> np.ndarray:
        return self.x[:1].copy()

    def disturbances(self, t: float):
        return self.profile.at(t)

    def advance(self, u_phys, t: float) -> np.ndarray:
        u = float(self.box.clip(np.atleast_1d(u_phys))[0])
        self.x = plant_mod.step(self.x, u, self.profile, t, self.params,
                                self.tau_s, self.substeps, box=None)
        return self.output()


class ModelPlant:
    """The trained model acting as its own plant, for nominal closed-loop
    studies; physical units at the boundary, no disturbances."""

    def __init__(self, model: NnarxModel, x0_norm, box: InputBox):
        self.model = model
        self.norm = model.normalization
        self.x = np.asarray(x0_norm, float).copy()
        self.box = box

    def output(self) -> np.ndarray:
        return self.norm.denorm_y(output(self.model, self.x))

    def disturbances(self, t: float):
        return (float("nan"), float("nan"))

    def advance(self, u_phys, t: float) -> np.ndarray:
        u = self.box.clip(np.atleast_1d(u_phys))
        self.x = step(self.model, self.x, self.norm.norm_u(u))
        return self.output()


# ---------------------------------------------------------------------------
# Scenario and closed loop


@dataclass
class Scenario:
    """Reference schedule, disturbance schedule and run length, all in
    plant units; times are absolute seconds on the sampling grid."""

    references: list
    disturbance_w: list
    disturbance_Ti: list
    duration_steps: int
    tau_s: float

    def __post_init__(self):
        times = [t for t, _ in self.references]
        if times != sorted(times) or times[0] != 0.0:
            raise ValueError("reference schedule must start at 0 and increase")
        horizon = (self.duration_steps - 1) * self.tau_s
        if any(t > horizon for t, _ in self.references):
            raise ValueError("reference change beyond the run duration")

    def reference_at(self, t: float) -> float:
        out = self.references[0][1]
        for start, value in self.references:
            if t >= start:
                out = value
        return out

    def profile(self) -> DisturbanceProfile:
        return DisturbanceProfile([tuple(p) for p in self.disturbance_w],
                                  [tuple(p) for p in self.disturbance_Ti])

    def event_samples(self) -> list:
        """Sample indices where the reference or a disturbance steps."""
        events = set()
        for t, _ in self.references:
            events.add(int(round(t / self.tau_s)))
        for sched in (self.disturbance_w, self.disturbance_Ti):
            for t, _ in sched[1:]:
                events.add(int(round(t / self.tau_s)))
        return sorted(e for e in events if e < self.duration_steps)

    @staticmethod
    def from_config(cfg: dict) -> "Scenario":
        sc = cfg["scenario"]
        return Scenario(sc["references"], sc["disturbance_w"],
                        sc["disturbance_Ti"], int(sc["duration_steps"]),
                        float(cfg["tau_s"]))


def closed_loop(model: NnarxModel, controller, plant, scenario: Scenario,
                box_phys: InputBox, u0_phys: float,
                max_consecutive_failures: int = 5):
    """Run the sampled loop: measure, solve, apply, log.

    The measured input/output window is maintained here in normalized
    units; reference changes re-tune the primary controller through its
    set_reference (the integrator state carries over).  Repeated solver
    failures abort with the partial trace.
    """
    norm = model.normalization
    N = model.N
    K = scenario.duration_steps
    tau = scenario.tau_s
    is_deb = isinstance(controller, DebMpcController)

    y0 = plant.output()
    u0_n = norm.norm_u([u0_phys])
    ys_n = [norm.norm_y(y0)] * N
    us_n = [u0_n] * N

    y_ref_phys = scenario.reference_at(0.0)
    controller.set_reference(norm.norm_y([y_ref_phys]))
    if is_deb:
        controller.initialize_history(u0_n, norm.norm_y(y0))
    else:
        controller.initialize_state(u0_n)

    cols = ["t", "y_ref", "y", "u", "xi", "gamma", "w", "Ti", "cost",
            "terminal_residual", "inner_evals", "outer_iterations",
            "converged"]
    if is_deb:
        cols.append("d_hat")
    rows = []
    wall_times = []
    failures = 0
    y_meas = y0
    current_ref = y_ref_phys
    aborted = False

    for k in range(K):
        t = k * tau
        ref = scenario.reference_at(t)
        if ref != current_ref:
            controller.set_reference(norm.norm_y([ref]))
            current_ref = ref
        y_n = norm.norm_y(y_meas)
        x_k = np.concatenate([np.concatenate([y, u])
                              for y, u in zip(ys_n[-N:], us_n[-N:])])
        if is_deb:
            u_n, diag = controller.step(x_k)
            xi_log = np.full(model.m, np.nan)
            gamma_log = np.full(model.m, np.nan)
        else:
            xi_before = controller.xi.copy()
            u_n, diag = controller.step(x_k)
            xi_log = norm.denorm_u(xi_before)
            # derivative contribution in physical input units
            gamma_log = (u_n - xi_before) * norm.u_scale
        u_phys = box_phys.clip(norm.denorm_u(u_n))
        w_now, Ti_now = plant.disturbances(t)
        row = [t, ref, float(y_meas[0]), float(u_phys[0]),
               float(xi_log[0]), float(gamma_log[0]),
               w_now, Ti_now, diag["cost"], diag["terminal_residual"],
               diag["inner_evals"], diag["outer_iterations"],
               int(bool(diag["converged"]))]
        if is_deb:
            row.append(float(diag["d_hat"][0]))
        rows.append(row)
        wall_times.append(diag["wall_time"])
        failures = 0 if diag["converged"] else failures + 1
        if failures > max_consecutive_failures:
            log.error("aborting run: %d consecutive solver failures at k=%d",
                      failures, k)
            aborted = True
            break
        y_next = plant.advance(u_phys, t)
        u_applied_n = norm.norm_u(u_phys)
        if is_deb:
            controller.observe(u_applied_n, norm.norm_y(y_next))
        ys_n.append(norm.norm_y(y_next))
        us_n.append(u_applied_n)
        ys_n, us_n = ys_n[-N:], us_n[-N:]
        y_meas = y_next

    trace = {name: np.array([r[i] for r in rows])
             for i, name in enumerate(cols)}
    return trace, {"aborted": aborted, "wall_times": np.array(wall_times)}


def write_trace(trace: dict, path) -> None:
    cols = list(trace.keys())
    K = len(trace[cols[0]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(K):
            w.writerow([repr(float(trace[c][k])) for c in cols])


def read_trace(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    return {name: np.array([float(r[i]) for r in data])
            for i, name in enumerate(header)}


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class RunMetrics:
    segments: list            # one record per inter-event segment
    max_input_violation: float
    total_squared_control_increment: float
    model_fit: float | None
    aborted: bool

    def to_dict(self) -> dict:
        return {
            "segments": self.segments,
            "max_input_violation": self.max_input_violation,
            "total_squared_control_increment":
                self.total_squared_control_increment,
            "model_fit": self.model_fit,
            "aborted": self.aborted,
        }


def compute_metrics(trace: dict, scenario: Scenario, box_phys: InputBox,
                    band: float = 0.1, model_fit: float | None = None,
                    aborted: bool = False) -> RunMetrics:
    """Per-segment steady-state error and settling time, plus trace-wide
    input statistics.  Segments run between consecutive events; offsets are
    taken over the last tenth of each segment."""
    K = len(trace["t"])
    e = trace["y_ref"] - trace["y"]
    events = [ev for ev in scenario.event_samples() if ev < K]
    bounds = events + [K]
    segments = []
    for s, (k0, k1) in enumerate(zip(bounds[:-1], bounds[1:])):
        seg_e = np.abs(e[k0:k1])
        tail = max(1, (k1 - k0) // 10)
        settled = None
        for k in range(k0, k1):
            if np.all(np.abs(e[k:k1]) < band):
                settled = k - k0
                break
        segments.append({
            "start_sample": int(k0),
            "end_sample": int(k1),
            "y_ref": float(trace["y_ref"][k0]),
            "steady_state_abs_error": float(np.mean(seg_e[-tail:])),
            "max_abs_error": float(np.max(seg_e)),
            "settling_samples": settled,
        })
    u = trace["u"]
    viol = float(max(0.0, np.max(box_phys.lower[0] - u),
                     np.max(u - box_phys.upper[0])))
    du = np.diff(u)
    return RunMetrics(segments, viol, float(np.sum(du * du)), model_fit,
                      aborted)


# ---------------------------------------------------------------------------
# Stages


def _plant_params(cfg) -> PlantParams:
    return PlantParams(**cfg["plant"]["params"])


def _input_box(cfg) -> InputBox:
    lo, hi = cfg["plant"]["input_box"]
    return InputBox([lo], [hi])


def stage_generate(cfg: dict, outdir: Path, force: bool = False) -> dict:
    """Excite the plant with multilevel steps and record three independent
    experiments (training, validation, test)."""
    data_dir = outdir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: data_dir / f"{name}.csv"
             for name in ("train", "val", "test")}
    if not force and all(p.exists() for p in paths.values()):
        log.info("generate: cached")
        return {k: IoSequence.from_csv(p) for k, p in paths.items()}
    params = _plant_params(cfg)
    box = _input_box(cfg)
    dc = cfg["data"]
    tau = float(cfg["tau_s"])
    levels = np.linspace(box.lower[0], box.upper[0], int(dc["levels"]))
    profile = DisturbanceProfile([(0.0, params.w_nom)], [(0.0, params.T_i_nom)])
    x0 = equilibrium(cfg["plant"]["initial_input"], params.w_nom,
                     params.T_i_nom, params)
    seed = int(cfg["seed"])
    records = {}
    for i, (name, steps) in enumerate(
            [("train", dc["train_steps"]), ("val", dc["val_steps"]),
             ("test", dc["test_steps"])]):
        u = generate_mprs(levels, dc["dwell"], int(steps), seed=seed + i,
                          box=box)
        rec = open_loop_experiment(u, profile, x0, params, tau,
                                   substeps=int(cfg["plant"]["substeps"]),
                                   noise_std=float(dc["noise_std"]),
                                   seed=seed + 100 + i, box=box)
        rec.to_csv(paths[name])
        records[name] = rec
    log.info("generate: wrote %s", data_dir)
    return records


def stage_train(cfg: dict, outdir: Path, records=None, force: bool = False):
    model_path = outdir / "model.json"
    report_path = outdir / "train_report.json"
    if not force and model_path.exists() and report_path.exists():
        log.info("train: cached")
        return load_model(model_path)
    if records is None:
        records = stage_generate(cfg, outdir)
    dc = cfg["data"]
    seed = int(cfg["seed"])
    T_s = int(dc["subsequence_length"])
    dataset = Dataset(
        extract_subsequences(records["train"], T_s, int(dc["train_count"]),
                             seed + 10),
        extract_subsequences(records["val"], T_s, int(dc["val_count"]),
                             seed + 11),
        extract_subsequences(records["test"], T_s, int(dc["test_count"]),
                             seed + 12),
    )
    mc = cfg["model"]
    params0 = init_params(int(mc["N"]), 1, 1, tuple(mc["hidden"]),
                          seed=seed + 20)
    model0 = make_model(int(mc["N"]), params0)
    tc = cfg["train"]
    config = TrainConfig(learning_rate=float(tc["learning_rate"]),
                         max_epochs=int(tc["max_epochs"]),
                         patience=int(tc["patience"]),
                         penalty_weight=float(tc["penalty_weight"]),
                         margin_target=float(tc["margin_target"]),
                         batch_size=tc["batch_size"], seed=seed + 21)
    t0 = time.perf_counter()
    model, history = train(model0, dataset, config)
    elapsed = time.perf_counter() - t0
    from .nnarx import contraction_margin
    fit = evaluate_fit(model, dataset.test[0]) if dataset.test else None
    report = {
        "seed": seed,
        "train_config": tc,
        "epochs_run": history["epochs_run"],
        "best_epoch": history["best_epoch"],
        "best_val_loss": history["best_val_loss"],
        "final_fit": fit,
        "final_contraction_margin": contraction_margin(model.params),
        "penalty_weight_used": history["penalty_weight"],
        "training_seconds": elapsed,
        "val_loss_curve": [e["val_loss"] for e in history["epochs"]],
    }
    save_model(model, model_path)
    write_json(report, report_path)
    log.info("train: FIT %s margin %.4f (%d epochs, %.0f s)",
             "-" if fit is None else f"{fit:.2f}%",
             report["final_contraction_margin"],
             history["epochs_run"], elapsed)
    return model


def _controller_pieces(cfg: dict, model: NnarxModel):
    cc = cfg["controller"]
    wc = cc["weights"]
    weights = MpcWeights.defaults_for(model, R_e=float(wc["R_e"]),
                                      R_u=float(wc["R_u"]),
                                      Q_xi=float(wc["Q_xi"]),
                                      Q_theta=float(wc["Q_theta"]))
    config = MpcConfig(horizon=int(cc["horizon"]),
                       control_horizon=cc["control_horizon"],
                       terminal_tol=float(cc["terminal_tol"]),
                       mu_tilde=cc["mu_tilde"],
                       mu_tilde_ratio=float(cc["mu_tilde_ratio"]))
    box_n = _input_box(cfg).normalized(model.normalization)
    return weights, config, box_n


def stage_tune(cfg: dict, outdir: Path, model=None, force: bool = False):
    """Certify every scenario setpoint: equilibrium, linearized stability,
    structural checks, gain search."""
    path = outdir / "tuning.json"
    if not force and path.exists():
        log.info("tune: cached")
        with open(path) as fh:
            return json.load(fh)
    if model is None:
        model = stage_train(cfg, outdir)
    from .augmentation import tune_for_setpoint
    weights, config, box_n = _controller_pieces(cfg, model)
    norm = model.normalization
    u_guess = norm.norm_u([cfg["plant"]["initial_input"]])
    entries = []
    for t_start, y_phys in cfg["scenario"]["references"]:
        tuning = tune_for_setpoint(model, norm.norm_y([y_phys]), u_guess,
                                   box=box_n, mu_tilde=config.mu_tilde,
                                   mu_tilde_ratio=config.mu_tilde_ratio)
        doc = tuning.to_dict()
        doc["y_ref_kelvin"] = float(y_phys)
        doc["u_eq_physical"] = [float(v) for v in
                                norm.denorm_u(tuning.equilibrium.u)]
        entries.append(doc)
        u_guess = tuning.equilibrium.u
    report = {"setpoints": entries}
    write_json(report, path)
    log.info("tune: %d setpoints certified", len(entries))
    return report


def _make_plant(cfg: dict, scenario: Scenario, kind: str, model: NnarxModel):
    params = _plant_params(cfg)
    box = _input_box(cfg)
    u0 = float(cfg["plant"]["initial_input"])
    if kind == "ode":
        w0, Ti0 = scenario.profile().at(0.0)
        x0 = equilibrium(u0, w0, Ti0, params)
        return OdePlant(params, scenario.profile(), x0.as_array(),
                        float(cfg["tau_s"]), int(cfg["plant"]["substeps"]),
                        box), u0
    norm = model.normalization
    x0 = model.stacked_state(norm.norm_y([scenario.references[0][1]]),
                             norm.norm_u([u0]))
    return ModelPlant(model, x0, box), u0


def run_closed_loop(cfg: dict, model: NnarxModel, controller_kind: str,
                    plant_kind: str = "ode"):
    """Build the controller and plant for the configured scenario and run
    the loop; returns (trace, run info, metrics)."""
    scenario = Scenario.from_config(cfg)
    weights, config, box_n = _controller_pieces(cfg, model)
    if controller_kind == "proposed":
        controller = MpcController(model, box=box_n, weights=weights,
                                   config=config)
    elif controller_kind == "debmpc":
        dbc = cfg["debmpc"]
        controller = DebMpcController(
            model, box=box_n, weights=weights, config=config,
            mhe=MheConfig(window=int(dbc["window"]),
                          residual_weight=float(dbc["residual_weight"]),
                          prior_weight=float(dbc["prior_weight"])))
    else:
        raise ValueError(f"unknown controller kind {controller_kind!r}")
    plant, u0 = _make_plant(cfg, scenario, plant_kind, model)
    trace, info = closed_loop(model, controller, plant, scenario,
                              _input_box(cfg), u0)
    fit = None
    metrics = compute_metrics(trace, scenario, _input_box(cfg),
                              band=float(cfg["metrics"]["settling_band"]),
                              model_fit=fit, aborted=info["aborted"])
    return trace, info, metrics


def stage_run(cfg: dict, outdir: Path, controller_kind: str, model=None,
              force: bool = False):
    traces = outdir / "traces"
    mdir = outdir / "metrics"
    traces.mkdir(exist_ok=True, parents=True)
    mdir.mkdir(exist_ok=True, parents=True)
    trace_path = traces / f"{controller_kind}.csv"
    metric_path = mdir / f"{controller_kind}.json"
    if not force and trace_path.exists() and metric_path.exists():
        log.info("run[%s]: cached", controller_kind)
        with open(metric_path) as fh:
            return read_trace(trace_path), json.load(fh)
    if model is None:
        model = stage_train(cfg, outdir)
    t0 = time.perf_counter()
    trace, info, metrics = run_closed_loop(cfg, model, controller_kind)
    elapsed = time.perf_counter() - t0
    write_trace(trace, trace_path)
    doc = metrics.to_dict()
    write_json(doc, metric_path)
    timing_path = outdir / "timings.json"
    timings = {}
    if timing_path.exists():
        with open(timing_path) as fh:
            timings = json.load(fh)
    timings[controller_kind] = {
        "loop_seconds": elapsed,
        "mean_solve_seconds": float(np.mean(info["wall_times"])),
        "max_solve_seconds": float(np.max(info["wall_times"])),
    }
    write_json(timings, timing_path)
    log.info("run[%s]: %d samples in %.0f s", controller_kind,
             len(trace["t"]), elapsed)
    return trace, doc


def stage_report(cfg: dict, outdir: Path, force: bool = False) -> dict:
    """Reduce both runs into one comparison document and a text table."""
    path = outdir / "report.json"
    if not force and path.exists():
        with open(path) as fh:
            return json.load(fh)
    report = {"band_kelvin": cfg["metrics"]["settling_band"]}
    for kind in ("proposed", "debmpc"):
        mpath = outdir / "metrics" / f"{kind}.json"
        if mpath.exists():
            with open(mpath) as fh:
                report[kind] = json.load(fh)
    tr_path = outdir / "train_report.json"
    if tr_path.exists():
        with open(tr_path) as fh:
            tr = json.load(fh)
        report["model_fit"] = tr.get("final_fit")
        report["contraction_margin"] = tr.get("final_contraction_margin")
    write_json(report, path)
    lines = [f"{'segment':>8} {'y_ref[K]':>9} {'ss|e| prop':>11} "
             f"{'ss|e| deb':>11} {'settle prop':>12} {'settle deb':>11}"]
    if "proposed" in report and "debmpc" in report:
        for sp, sd in zip(report["proposed"]["segments"],
                          report["debmpc"]["segments"]):
            lines.append(
                f"{sp['start_sample']:>8} {sp['y_ref']:>9.2f} "
                f"{sp['steady_state_abs_error']:>11.4f} "
                f"{sd['steady_state_abs_error']:>11.4f} "
                f"{str(sp['settling_samples']):>12} "
                f"{str(sd['settling_samples']):>11}")
    (outdir / "report.txt").write_text("\n".join(lines) + "\n")
    return report


def run_pipeline(config, outdir, force_stages=()) -> Path:
    """Execute every stage in order with per-stage caching.

    config is a dict (already merged) or a path to a JSON overrides file;
    force_stages names stages to recompute ("generate", "train", "tune",
    "run", "report" or "all").
    """
    cfg = load_config(config) if isinstance(config, (str, Path)) else \
        merge_config(config)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    snap = outdir / "config.json"
    if snap.exists():
        with open(snap) as fh:
            prev = json.load(fh)
        if prev != cfg and "all" not in force_stages:
            raise RuntimeError(
                f"{snap} holds a different configuration; pass "
                f"force_stages=['all'] or use a fresh directory")
    write_json(cfg, snap)

    def forced(name):
        return name in force_stages or "all" in force_stages

    records = stage_generate(cfg, outdir, force=forced("generate"))
    model = stage_train(cfg, outdir, records, force=forced("train"))
    stage_tune(cfg, outdir, model, force=forced("tune"))
    stage_run(cfg, outdir, "proposed", model, force=forced("run"))
    stage_run(cfg, outdir, "debmpc", model, force=forced("run"))
    stage_report(cfg, outdir, force=True)
    return outdir
