"""Command-line interface for cellfree-sleep."""

import logging
from pathlib import Path
from typing import NoReturn, Optional, Tuple

import click

from .baselines import dqn_train, needs_checkpoint, resolve_policy
from .config import ScenarioConfig, load_scenario
from .env import CellFreeEnv
from .errors import CheckpointError, ScenarioParseError, ScenarioValidationError, TrainingDivergedError
from .mappo import train as mappo_train
from .metrics import figdata as build_figdata
from .metrics import make_run_dir, render_report, run_episodes, write_config_echo
from .traffic import build_profile


class ConfigError(click.ClickException):
    """Invalid scenario, run validation failure or divergence."""

    exit_code = 2


class MissingCheckpoint(click.ClickException):
    exit_code = 3


def _fail(error: click.ClickException) -> NoReturn:
    click.echo(f"❌ Error: {error.message}", err=True)
    raise error


def _load(config_path: Path, seed: Optional[int]) -> Tuple[ScenarioConfig, Path]:
    try:
        cfg = load_scenario(config_path)
    except (ScenarioParseError, ScenarioValidationError, FileNotFoundError) as e:
        _fail(ConfigError(str(e)))
    if seed is not None:
        cfg = cfg.model_copy(update={"rng_seed": seed})
    base_dir = config_path if config_path.is_dir() else config_path.parent
    try:
        build_profile(cfg, base_dir)
    except (ScenarioValidationError, ValueError, FileNotFoundError) as e:
        _fail(ConfigError(str(e)))
    return cfg, base_dir


config_argument = click.argument("config", type=click.Path(exists=True, path_type=Path))
seed_option = click.option("--seed", type=int, default=None, help="Override rng_seed from the scenario")
output_option = click.option(
    "--output-dir", "-o", type=click.Path(file_okay=False, path_type=Path), default=Path("runs"),
    show_default=True, help="Parent directory for run directories",
)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose output")
def main(verbose: bool):
    """Cell-free massive MIMO sleep-mode simulator and trainers.

    CONFIG is a scenario.yaml file or a directory holding one.
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command("validate-config")
@config_argument
def validate_config(config: Path):
    """Parse and validate a scenario without running anything."""
    cfg, _ = _load(config, None)
    click.echo(
        f"✅ Valid scenario: {cfg.num_aps} APs ({cfg.grid_rows}x{cfg.grid_cols}), "
        f"{cfg.max_antennas} antennas, tau_p={cfg.pilot_length}, {cfg.episode_steps} timesteps per episode"
    )


@main.command()
@config_argument
@click.option("--algo", type=click.Choice(["mappo", "dqn"]), default="mappo", show_default=True)
@seed_option
@output_option
@click.option("--resume", type=click.Path(path_type=Path), default=None, help="Continue from a MAPPO checkpoint")
@click.option("--max-iterations", type=int, default=None, help="Stop after this many iterations")
def train(config: Path, algo: str, seed: Optional[int], output_dir: Path, resume: Optional[Path],
          max_iterations: Optional[int]):
    """Train MAPPO or the DQN baseline; writes checkpoint, learning curves and config echo."""
    cfg, base_dir = _load(config, seed)
    if resume is not None:
        if algo != "mappo":
            _fail(ConfigError("--resume is only supported for mappo"))
        if not resume.exists():
            _fail(MissingCheckpoint(f"checkpoint not found: {resume}"))

    run_dir = make_run_dir(output_dir, "train", algo)
    write_config_echo(run_dir, cfg)
    try:
        if algo == "mappo":
            result = mappo_train(cfg, run_dir, base_dir=base_dir, resume=resume, max_iterations=max_iterations)
        else:
            result = dqn_train(cfg, run_dir, base_dir=base_dir, max_iterations=max_iterations)
    except TrainingDivergedError as e:
        _fail(ConfigError(str(e)))
    except CheckpointError as e:
        _fail(MissingCheckpoint(str(e)))

    render_report(run_dir, kind="train", cfg=cfg, train={"algo": algo, **result.model_dump(mode="json")})
    click.echo(f"✅ Trained {algo} for {result.iterations} iterations ({result.env_steps} timesteps)")
    click.echo(f"✅ Run directory: {run_dir}")


@main.command("eval")
@config_argument
@click.option("--policy", "policy_spec", required=True,
              help="always-on, dac-sm1, mappo:<checkpoint> or dqn:<checkpoint>")
@click.option("--episodes", type=int, default=1, show_default=True)
@seed_option
@output_option
@click.option("--reference", type=click.Path(path_type=Path), default=None,
              help="Run directory whose summary is the savings baseline")
def evaluate(config: Path, policy_spec: str, episodes: int, seed: Optional[int], output_dir: Path,
             reference: Optional[Path]):
    """Evaluate a policy on paired-seed episodes; writes trace, summary and drop ledger."""
    cfg, base_dir = _load(config, seed)
    name, _, checkpoint = policy_spec.partition(":")
    if needs_checkpoint(policy_spec) and not checkpoint:
        _fail(MissingCheckpoint(f"policy '{name}' needs a checkpoint: {name}:<path>"))
    if needs_checkpoint(policy_spec) and not Path(checkpoint).exists():
        _fail(MissingCheckpoint(f"checkpoint not found: {checkpoint}"))
    if reference is not None and not reference.exists():
        _fail(ConfigError(f"reference run not found: {reference}"))

    env = CellFreeEnv(cfg, base_dir=base_dir)
    try:
        policy = resolve_policy(policy_spec, cfg, env)
    except ValueError as e:
        _fail(ConfigError(str(e)))
    except CheckpointError as e:
        _fail(MissingCheckpoint(str(e)))

    run_dir = make_run_dir(output_dir, "eval", name)
    result = run_episodes(policy, cfg, episodes, out_dir=run_dir, env=env, reference=reference)
    s = result.summary
    click.echo(f"✅ {s.policy}: mean P_net {s.mean_p_net:.2f} W, mean drop ratio {s.mean_drop_ratio:.5f}")
    if s.savings_pct is not None:
        click.echo(f"✅ Savings vs {s.reference}: {s.savings_pct:.2f}%")
    click.echo(f"✅ Run directory: {run_dir}")


@main.command()
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--output-dir", "-o", type=click.Path(file_okay=False, path_type=Path), default=Path("figdata"),
              show_default=True)
def figdata(run_dirs: Tuple[Path, ...], output_dir: Path):
    """Emit figure-ready CSVs from evaluation run directories."""
    result = build_figdata(run_dirs, output_dir)
    for path in result.written:
        click.echo(f"✅ Wrote {path}")
    for where, columns in result.missing.items():
        click.echo(f"❌ {where}: missing {', '.join(sorted(set(columns)))}", err=True)
    if result.missing:
        raise ConfigError(f"{len(result.missing)} file(s) lack required lanes")


if __name__ == "__main__":
    main()
