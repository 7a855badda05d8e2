"""YAML run configuration.

The file mirrors the dataclass fields it fills: top-level ``policy``,
``mode`` and ``weights`` select the policy, the ``arena``, ``sensor``,
``episode`` and ``ivfm`` sections override episode defaults, and ``run``
holds the batch parameters.  Every key is checked; an unknown or
mistyped key fails loading with its dotted path, so typos cannot
silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .grid_world import ArenaKind, ArenaSpec, SensorSpec
from .mapping import IvfmParams, StateMode
from .policies import GreedyWeights, PolicySpec
from .swarm import EpisodeConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    """Batch parameters: episode i runs with seed seed_base + i."""

    n_episodes: int = 50
    seed_base: int = 0
    output_dir: Path = Path("runs/out")
    parallelism: int = 1
    snapshot_every: int = 0
    traces: bool = False

    def __post_init__(self) -> None:
        if self.n_episodes < 1:
            raise ConfigError("run.n_episodes must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("run.parallelism must be >= 1")
        if self.snapshot_every < 0:
            raise ConfigError("run.snapshot_every must be >= 0")


@dataclass
class RunConfig:
    """Episode template plus batch settings; seed is assigned per episode."""

    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def episode_config(self, index: int) -> EpisodeConfig:
        cfg = self.episode
        return EpisodeConfig(
            arena_spec=cfg.arena_spec,
            seed=self.run.seed_base + index,
            n_agents=cfg.n_agents,
            policy=cfg.policy,
            mode=cfg.mode,
            sensor=cfg.sensor,
            ivfm=cfg.ivfm,
            crop_side=cfg.crop_side,
            step_budget=cfg.step_budget,
            exploration_only=cfg.exploration_only,
            coverage_threshold=cfg.coverage_threshold,
        )


def _require_mapping(value, path: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{path} must be a mapping")
    return value


def _take(section: dict, key: str, path: str, kinds, default):
    if key not in section:
        return default
    value = section.pop(key)
    if kinds is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}.{key} must be a boolean")
        return value
    if kinds is int:
        # bool is an int subclass; reject it explicitly
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}.{key} must be an integer")
        return value
    if kinds is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}.{key} must be a number")
        return float(value)
    if kinds is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}.{key} must be a string")
        return value
    raise AssertionError(f"unhandled kind {kinds}")


def _reject_leftovers(section: dict, path: str) -> None:
    if section:
        name = sorted(section)[0]
        where = f"{path}.{name}" if path else name
        raise ConfigError(f"unknown key {where!r}")


def _parse_arena(section: dict) -> ArenaSpec:
    kind_name = _take(section, "kind", "arena", str, "one_x")
    try:
        base = ArenaSpec.from_kind(kind_name)
    except ValueError:
        raise ConfigError(f"arena.kind must be one of {[k.value for k in ArenaKind]}") from None
    spec = ArenaSpec(
        kind=base.kind,
        side_m=_take(section, "side_m", "arena", float, base.side_m),
        max_columns=_take(section, "max_columns", "arena", int, base.max_columns),
        column_width_m=_take(section, "column_width_m", "arena", float, base.column_width_m),
        divider_len_m=_take(section, "divider_len_m", "arena", float, base.divider_len_m),
        divider_thick_m=_take(section, "divider_thick_m", "arena", float, base.divider_thick_m),
        resolution=_take(section, "resolution", "arena", float, base.resolution),
    )
    _reject_leftovers(section, "arena")
    return spec


def parse_config(raw: dict) -> RunConfig:
    raw = dict(_require_mapping(raw, "config"))

    policy_name = _take(raw, "policy", "", str, "greedy")
    mode_name = _take(raw, "mode", "", str, StateMode.VFM4.value)
    try:
        mode = StateMode(mode_name)
    except ValueError:
        raise ConfigError(f"mode must be one of {[m.value for m in StateMode]}") from None

    weights_raw = _require_mapping(raw.pop("weights", None), "weights")
    defaults = GreedyWeights()
    weights = GreedyWeights(
        w_gain=_take(weights_raw, "w_gain", "weights", float, defaults.w_gain),
        w_visit=_take(weights_raw, "w_visit", "weights", float, defaults.w_visit),
        w_dist=_take(weights_raw, "w_dist", "weights", float, defaults.w_dist),
        gain_radius_cells=_take(weights_raw, "gain_radius_cells", "weights", int, defaults.gain_radius_cells),
    )
    _reject_leftovers(weights_raw, "weights")
    try:
        policy = PolicySpec(name=policy_name, weights=weights)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    arena = _parse_arena(_require_mapping(raw.pop("arena", None), "arena"))

    sensor_raw = _require_mapping(raw.pop("sensor", None), "sensor")
    sensor_defaults = SensorSpec()
    sensor = SensorSpec(
        range_m=_take(sensor_raw, "range_m", "sensor", float, sensor_defaults.range_m),
        fov_rad=_take(sensor_raw, "fov_rad", "sensor", float, sensor_defaults.fov_rad),
        ray_count=_take(sensor_raw, "ray_count", "sensor", int, sensor_defaults.ray_count),
    )
    _reject_leftovers(sensor_raw, "sensor")

    ivfm_raw = _require_mapping(raw.pop("ivfm", None), "ivfm")
    ivfm_defaults = IvfmParams()
    ivfm = IvfmParams(
        lam=_take(ivfm_raw, "lam", "ivfm", float, ivfm_defaults.lam),
        eps=_take(ivfm_raw, "eps", "ivfm", float, ivfm_defaults.eps),
        variant=_take(ivfm_raw, "variant", "ivfm", str, ivfm_defaults.variant),
    )
    _reject_leftovers(ivfm_raw, "ivfm")

    ep_raw = _require_mapping(raw.pop("episode", None), "episode")
    ep_defaults = EpisodeConfig()
    try:
        episode = EpisodeConfig(
            arena_spec=arena,
            seed=0,
            n_agents=_take(ep_raw, "n_agents", "episode", int, ep_defaults.n_agents),
            policy=policy,
            mode=mode,
            sensor=sensor,
            ivfm=ivfm,
            crop_side=_take(ep_raw, "crop_side", "episode", int, ep_defaults.crop_side),
            step_budget=_take(ep_raw, "step_budget", "episode", int, ep_defaults.step_budget),
            exploration_only=_take(ep_raw, "exploration_only", "episode", bool, ep_defaults.exploration_only),
            coverage_threshold=_take(ep_raw, "coverage_threshold", "episode", float, ep_defaults.coverage_threshold),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _reject_leftovers(ep_raw, "episode")

    run_raw = _require_mapping(raw.pop("run", None), "run")
    run_defaults = RunSettings()
    run = RunSettings(
        n_episodes=_take(run_raw, "n_episodes", "run", int, run_defaults.n_episodes),
        seed_base=_take(run_raw, "seed_base", "run", int, run_defaults.seed_base),
        output_dir=Path(_take(run_raw, "output_dir", "run", str, str(run_defaults.output_dir))),
        parallelism=_take(run_raw, "parallelism", "run", int, run_defaults.parallelism),
        snapshot_every=_take(run_raw, "snapshot_every", "run", int, run_defaults.snapshot_every),
        traces=_take(run_raw, "traces", "run", bool, run_defaults.traces),
    )
    _reject_leftovers(run_raw, "run")

    _reject_leftovers(raw, "")
    return RunConfig(episode=episode, run=run)


def load_config(path: Path | str) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return parse_config(raw)
