"""Evaluation runs, step traces, summaries, run directories and figure data."""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader
from pydantic import BaseModel, ConfigDict

from .config import ScenarioConfig, config_echo, config_hash
from .env import NUM_SLEEP_CHOICES, APStatus, CellFreeEnv, JointAction, StepInfo
from .traffic import TrafficProfile

logger = logging.getLogger(__name__)

Policy = Callable[[np.ndarray, APStatus], JointAction]

EVAL_EPISODE_BASE = 1_000_000
MODE_COLUMNS = [f"sm{s}" for s in range(NUM_SLEEP_CHOICES)]
TRACE_COLUMNS = ["episode", "time_s", "timesteps", "p_net", "p_ap", "p_cloud", "num_ues", "demand_rate",
                 "offered_load", "drop_ratio", *MODE_COLUMNS, "mean_antennas"]
TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.json"
LEDGER_FILE = "drop_ledger.csv"
CONFIG_FILE = "config.json"
REPORT_FILE = "report.md"

FIGURES = {
    "sleep_modes.csv": ["episode", "time_s", *MODE_COLUMNS],
    "demand_rate.csv": ["episode", "time_s", "offered_load", "demand_rate"],
    "antennas.csv": ["episode", "time_s", "mean_antennas"],
}
KPI_FILE = "kpi.csv"


class TraceRecorder:
    """Folds every ``every`` decision steps into one trace row.

    Powers, demand and antennas are timestep-weighted means over the window;
    UE count, drop ratio and per-AP state are taken at the window end.
    """

    def __init__(self, episode: int, every: int, num_aps: int):
        self.episode = episode
        self.every = every
        self.num_aps = num_aps
        self.rows: List[dict] = []
        self._window: List[StepInfo] = []

    def record(self, info: StepInfo):
        self._window.append(info)
        if len(self._window) >= self.every:
            self.flush()

    def flush(self):
        window = [i for i in self._window if i.timesteps > 0]
        self._window = []
        if not window:
            return
        weights = np.array([i.timesteps for i in window], dtype=float)

        def mean(attr: str) -> float:
            return float(np.average([getattr(i, attr) for i in window], weights=weights))

        last = window[-1]
        row = {
            "episode": self.episode,
            "time_s": window[0].time_s,
            "timesteps": int(weights.sum()),
            "p_net": mean("p_net"),
            "p_ap": mean("p_ap"),
            "p_cloud": mean("p_cloud"),
            "num_ues": last.num_ues,
            "demand_rate": mean("demand_rate") / 1e6,
            "offered_load": window[0].offered_load,
            "drop_ratio": last.drop_ratio,
            "mean_antennas": mean("mean_antennas"),
        }
        row.update({col: last.mode_counts[s] for s, col in enumerate(MODE_COLUMNS)})
        row.update({f"m_{l}": m for l, m in enumerate(last.antennas)})
        row.update({f"s_{l}": s for l, s in enumerate(last.sleep_modes)})
        self.rows.append(row)

    def frame(self) -> pd.DataFrame:
        per_ap = [f"{k}_{l}" for k in ("m", "s") for l in range(self.num_aps)]
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS + per_ap)


class EvalSummary(BaseModel):
    policy: str
    seed: int
    config_hash: str
    episodes: int
    timesteps: int
    mean_p_net: float
    mean_p_ap: float
    mean_p_cloud: float
    mean_drop_ratio: float
    departures: int
    drop_threshold: float
    drop_constraint_met: bool
    mean_antennas: float
    mode_share: List[float]
    reference: Optional[str] = None
    savings_pct: Optional[float] = None


class EvalResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    summary: EvalSummary
    trace: pd.DataFrame
    ledger: pd.DataFrame


def savings_pct(p_net: float, reference_p_net: float) -> float:
    """Percent power saved relative to the reference, two decimals."""
    return round(100.0 * (reference_p_net - p_net) / reference_p_net, 2)


def summarize(trace: pd.DataFrame, ledger: pd.DataFrame, cfg: ScenarioConfig, policy: str,
              episodes: int) -> EvalSummary:
    """Means are timestep-weighted over trace rows; the drop ratio averages every departure."""
    weights = trace["timesteps"].to_numpy(dtype=float)

    def mean(col: str) -> float:
        return float(np.average(trace[col].to_numpy(dtype=float), weights=weights)) if weights.sum() else 0.0

    drop = float(ledger["drop_fraction"].mean()) if len(ledger) else 0.0
    return EvalSummary(
        policy=policy,
        seed=cfg.rng_seed,
        config_hash=config_hash(cfg),
        episodes=episodes,
        timesteps=int(weights.sum()),
        mean_p_net=mean("p_net"),
        mean_p_ap=mean("p_ap"),
        mean_p_cloud=mean("p_cloud"),
        mean_drop_ratio=drop,
        departures=len(ledger),
        drop_threshold=cfg.drop_threshold,
        drop_constraint_met=drop <= cfg.drop_threshold,
        mean_antennas=mean("mean_antennas"),
        mode_share=[mean(col) / cfg.num_aps for col in MODE_COLUMNS],
    )


def policy_name(policy: Policy) -> str:
    return getattr(policy, "name", getattr(policy, "__name__", "policy"))


def run_episodes(policy: Policy, cfg: ScenarioConfig, episodes: int, out_dir: Optional[Path] = None,
                 env: Optional[CellFreeEnv] = None, profile: Optional[TrafficProfile] = None,
                 base_dir: Optional[Path] = None, reference: Optional[Path] = None) -> EvalResult:
    """Roll ``policy`` through the paired evaluation episodes.

    Episode ``i`` always uses traffic and shadowing streams
    ``EVAL_EPISODE_BASE + i``, so different policies see identical arrivals.
    """
    env = env or CellFreeEnv(cfg, profile, base_dir)
    name = policy_name(policy)
    traces, ledgers = [], []
    for i in range(episodes):
        episode = EVAL_EPISODE_BASE + i
        obs, _ = env.reset(episode=episode)
        recorder = TraceRecorder(episode, cfg.trace_every, cfg.num_aps)
        while not env.done:
            result = env.step(policy(obs, env.ap_status()))
            recorder.record(result.info)
            obs = result.observations
        recorder.flush()
        traces.append(recorder.frame())
        ledgers.append(env.ledger.to_frame().assign(episode=episode))
        logger.info("Evaluated %s episode %d: %d trace rows, %d departures", name, i,
                    len(recorder.rows), len(env.ledger))

    trace = pd.concat(traces, ignore_index=True)
    ledger = pd.concat(ledgers, ignore_index=True)
    summary = summarize(trace, ledger, cfg, name, episodes)
    if reference is not None:
        ref = load_summary(reference)
        summary = summary.model_copy(update={
            "reference": ref.policy,
            "savings_pct": savings_pct(summary.mean_p_net, ref.mean_p_net),
        })
    result = EvalResult(summary=summary, trace=trace, ledger=ledger)
    if out_dir is not None:
        write_eval_outputs(Path(out_dir), result, cfg)
    return result


# ---------------------------------------------------------------- run dirs


def make_run_dir(root: Path, kind: str, label: str) -> Path:
    """Fresh ``<root>/<timestamp>-<kind>-<label>[-n]``; existing runs are never reused."""
    root = Path(root)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}-{kind}-{label.replace(':', '-').replace('/', '-')}"
    candidate = root / base
    n = 1
    while candidate.exists():
        candidate = root / f"{base}-{n}"
        n += 1
    candidate.mkdir(parents=True)
    return candidate


def write_config_echo(out_dir: Path, cfg: ScenarioConfig) -> Path:
    path = Path(out_dir) / CONFIG_FILE
    path.write_text(config_echo(cfg) + "\n")
    return path


def write_eval_outputs(out_dir: Path, result: EvalResult, cfg: ScenarioConfig):
    out_dir.mkdir(parents=True, exist_ok=True)
    result.trace.to_csv(out_dir / TRACE_FILE, index=False)
    result.ledger.to_csv(out_dir / LEDGER_FILE, index=False)
    (out_dir / SUMMARY_FILE).write_text(json.dumps(result.summary.model_dump(), indent=2, sort_keys=True) + "\n")
    write_config_echo(out_dir, cfg)
    render_report(out_dir, kind="eval", summary=result.summary, cfg=cfg)


def load_summary(path: Path) -> EvalSummary:
    """Summary from a run directory or a summary.json path."""
    path = Path(path)
    if path.is_dir():
        path = path / SUMMARY_FILE
    if not path.exists():
        raise FileNotFoundError(f"no {SUMMARY_FILE} at {path}")
    return EvalSummary.model_validate_json(path.read_text())


def get_template_env() -> Environment:
    template_dir = Path(__file__).parent / "templates"
    env = Environment(loader=FileSystemLoader(template_dir), keep_trailing_newline=True)
    env.filters["fmt"] = lambda v, spec=".2f": format(v, spec)
    return env


def render_report(out_dir: Path, kind: str, cfg: ScenarioConfig, summary: Optional[EvalSummary] = None,
                  train: Optional[dict] = None) -> Path:
    template = get_template_env().get_template("run_report.md.j2")
    content = template.render(kind=kind, summary=summary, train=train, cfg=cfg,
                              config_hash=config_hash(cfg), modes=MODE_COLUMNS)
    path = Path(out_dir) / REPORT_FILE
    path.write_text(content)
    return path


# -------------------------------------------------------------- figure data


class FigdataResult(BaseModel):
    written: List[Path]
    missing: Dict[str, List[str]]


def figdata(run_dirs: Sequence[Path], out_dir: Path) -> FigdataResult:
    """Figure-ready CSVs from evaluation run directories.

    Writes one file per figure (sleep-mode counts, demand rate, mean active
    antennas) plus ``kpi.csv`` with one PC/drop bar per run. Lanes a run lacks
    are reported under ``missing`` keyed by ``<run>/<file>``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    missing: Dict[str, List[str]] = {}
    parts: Dict[str, List[pd.DataFrame]] = {name: [] for name in FIGURES}
    kpi_rows = []
    for run in map(Path, run_dirs):
        trace_path = run / TRACE_FILE
        if not trace_path.exists():
            missing[f"{run.name}/{TRACE_FILE}"] = ["*"]
        else:
            trace = pd.read_csv(trace_path)
            for name, columns in FIGURES.items():
                absent = [c for c in columns if c not in trace.columns]
                if absent:
                    missing[f"{run.name}/{TRACE_FILE}"] = missing.get(f"{run.name}/{TRACE_FILE}", []) + absent
                    continue
                parts[name].append(trace[columns].assign(run=run.name))
        try:
            s = load_summary(run)
        except (FileNotFoundError, ValueError):
            missing[f"{run.name}/{SUMMARY_FILE}"] = ["*"]
            continue
        kpi_rows.append({"run": run.name, "policy": s.policy, "mean_p_net": s.mean_p_net,
                         "mean_drop_ratio": s.mean_drop_ratio, "savings_pct": s.savings_pct})

    written = []
    for name, columns in FIGURES.items():
        frame = pd.concat(parts[name], ignore_index=True) if parts[name] else pd.DataFrame(columns=columns + ["run"])
        path = out_dir / name
        frame[["run", *columns]].to_csv(path, index=False)
        written.append(path)
    kpi_path = out_dir / KPI_FILE
    pd.DataFrame(kpi_rows, columns=["run", "policy", "mean_p_net", "mean_drop_ratio", "savings_pct"]).to_csv(
        kpi_path, index=False)
    written.append(kpi_path)
    for where, cols in missing.items():
        logger.warning("%s lacks lanes %s", where, ", ".join(sorted(set(cols))))
    return FigdataResult(written=written, missing=missing)
