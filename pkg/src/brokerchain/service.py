"""HTTP facade over the simulation harness.

Three operations: run a simulation from a flat key=value config, analyze one
or more previously produced metrics CSVs, and tabulate broker-vs-mesh
connection counts. Config problems map to 400, runtime failures to 500.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .config import ConfigError, parse_config
from .harness import RunFailure, analyze_csvs, run_simulation, topology_text, topology_rows

log = logging.getLogger(__name__)


class SimulateRequest(BaseModel):
    config: str = Field(description="flat key=value configuration text")
    mode: str | None = Field(default=None, description="override run.mode")


class SimulateResponse(BaseModel):
    rounds: int
    nodes: int
    mode: str
    elapsed_s: float
    chain_tip: str
    artifacts: dict[str, str]


class CsvInput(BaseModel):
    name: str
    content: str


class AnalyzeRequest(BaseModel):
    files: list[CsvInput]


class AnalyzeResponse(BaseModel):
    runs: list[str]
    report: str
    summaries: dict[str, list[float]]
    pairs: list[dict]
    correlations: dict[str, dict[str, float | None]]


class TopologyResponse(BaseModel):
    brokers: int
    rows: list[dict]
    crossover: int | None
    report: str


def create_app() -> FastAPI:
    app = FastAPI(title="brokerchain harness", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(req: SimulateRequest) -> SimulateResponse:
        try:
            config = parse_config(req.config)
            if req.mode is not None:
                if req.mode not in ("real", "seeded"):
                    raise ConfigError("run.mode", "must be real or seeded")
                config.mode = req.mode
        except ConfigError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        try:
            result = run_simulation(config)
        except RunFailure as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from None
        return SimulateResponse(
            rounds=config.rounds,
            nodes=config.nodes,
            mode=config.mode,
            elapsed_s=result.elapsed_s,
            chain_tip=next(iter(result.chains.values()))[-1].block_hash.hex(),
            artifacts={
                "metrics.csv": result.csv_text(),
                "injection_log.jsonl": result.injection_log_text(),
                "round_records.jsonl": result.round_records_text(),
                "summary.txt": result.summary_text(),
            },
        )

    @app.post("/analyze", response_model=AnalyzeResponse)
    def analyze(req: AnalyzeRequest) -> AnalyzeResponse:
        try:
            report = analyze_csvs([(f.name, f.content) for f in req.files])
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return AnalyzeResponse(
            runs=report.runs,
            report=report.text(),
            summaries={name: list(values) for name, values in report.summaries.items()},
            pairs=report.pairs,
            correlations=report.correlations,
        )

    @app.get("/topology", response_model=TopologyResponse)
    def topology(n_max: int = 20, brokers: int = 1) -> TopologyResponse:
        try:
            rows, crossover = topology_rows(n_max, brokers)
            report = topology_text(n_max, brokers)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return TopologyResponse(brokers=brokers, rows=rows, crossover=crossover, report=report)

    return app


app = create_app()
