"""HTTP front end over arena generation, episodes, and evaluations.

Single-process service; evaluation requests run synchronously and write
their artifacts to the server's filesystem, so point output_dir at a
path the caller can reach.  The CLI talks to this app in-process by
default and over the wire with --server.
"""

from __future__ import annotations

import base64
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .config import ConfigError, parse_config
from .grid_world import ArenaSpec, SensorSpec, arena_to_text, generate_arena
from .harness import compare, comparison_text, load_report, render_trace, run_evaluation
from .mapping import StateMode
from .metrics import record_from_episode
from .policies import PolicySpec
from .swarm import EpisodeConfig, run_episode


class ArenaRequest(BaseModel):
    kind: str = "one_x"
    seed: int = 0
    n_spawns: int = Field(default=1, ge=1)
    max_columns: int | None = None


class ArenaResponse(BaseModel):
    rows: int
    cols: int
    target_cell: tuple[int, int]
    spawn_cells: list[tuple[int, int]]
    text: str


class EpisodeRequest(BaseModel):
    policy: str = "greedy"
    mode: str = "vfm4"
    arena: str = "one_x"
    seed: int = 0
    n_agents: int = Field(default=1, ge=1)
    step_budget: int = Field(default=250, ge=1)
    exploration_only: bool = False
    max_columns: int | None = None
    range_m: float | None = None


class EpisodeResponse(BaseModel):
    policy: str
    mode: str
    agents: int
    arena: str
    seed: int
    rer: float
    pe: float
    steps: int
    overlap: float | None
    bandwidth_mib: float
    coverage: float
    found: bool
    wall_steps: int


class EvaluationRequest(BaseModel):
    config: dict = Field(default_factory=dict)


class CompareRequest(BaseModel):
    report_paths: list[str] = Field(default_factory=list)
    payloads: list[dict] = Field(default_factory=list)


class RenderRequest(BaseModel):
    trace_path: str
    out_dir: str = "renders"


def _arena_spec(kind: str, max_columns: int | None) -> ArenaSpec:
    try:
        base = ArenaSpec.from_kind(kind)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None
    if max_columns is None:
        return base
    return ArenaSpec(kind=base.kind, side_m=base.side_m, max_columns=max_columns)


def create_app() -> FastAPI:
    app = FastAPI(title="vfm-explore", version=__version__)

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/arena/generate", response_model=ArenaResponse)
    def arena_generate(req: ArenaRequest):
        spec = _arena_spec(req.kind, req.max_columns)
        arena = generate_arena(spec, req.seed, n_spawns=req.n_spawns)
        return ArenaResponse(
            rows=arena.shape[0],
            cols=arena.shape[1],
            target_cell=arena.target_cell,
            spawn_cells=list(arena.spawn_cells),
            text=arena_to_text(arena),
        )

    @app.post("/episode/run", response_model=EpisodeResponse)
    def episode_run(req: EpisodeRequest):
        try:
            policy = PolicySpec(name=req.policy)
            mode = StateMode(req.mode)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        sensor = SensorSpec() if req.range_m is None else SensorSpec(range_m=req.range_m)
        cfg = EpisodeConfig(
            arena_spec=_arena_spec(req.arena, req.max_columns),
            seed=req.seed,
            n_agents=req.n_agents,
            policy=policy,
            mode=mode,
            sensor=sensor,
            step_budget=req.step_budget,
            exploration_only=req.exploration_only,
        )
        result = run_episode(cfg)
        record = record_from_episode(result)
        return EpisodeResponse(**record.__dict__, wall_steps=result.wall_steps)

    @app.post("/evaluation/run")
    def evaluation_run(req: EvaluationRequest):
        try:
            cfg = parse_config(req.config)
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        run_evaluation(cfg)
        report_path = Path(cfg.run.output_dir) / "report.json"
        return {"output_dir": str(cfg.run.output_dir), "report": load_report(report_path)}

    @app.post("/report/compare")
    def report_compare(req: CompareRequest):
        payloads = list(req.payloads)
        try:
            for path in req.report_paths:
                payloads.append(load_report(path))
            result = compare(payloads)
        except (OSError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return {"comparison": result, "text": comparison_text(result)}

    @app.post("/render/heatmap")
    def render_heatmap(req: RenderRequest):
        try:
            written = render_trace(req.trace_path, req.out_dir)
        except (OSError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        images = {}
        for path in written:
            images[path.name] = base64.b64encode(path.read_bytes()).decode("ascii")
        return {"written": [str(p) for p in written], "images": images}

    return app


app = create_app()
