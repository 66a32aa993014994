"""HTTP service implementing the training wire protocol.

POST /train       submit a job (idempotent on the spec content)
GET  /jobs/{id}   job status with per-epoch checkpoints
POST /generate    generate with a named adapter (or the base model)

One training job runs at a time on a dedicated worker thread; generation
requests run concurrently against a separate model instance that shares
the same deterministic base weights.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import threading
from typing import Literal, Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .model import TinyCharLM
from .training import (
    Hyperparams,
    PairExample,
    SeqExample,
    critic_prompt,
    train_dpo_nll,
    train_nll,
)

logger = logging.getLogger(__name__)


class HyperparamsModel(BaseModel):
    adapter_rank: int = 64
    adapter_dropout: float = 0.05
    learning_rate: float = 5e-4
    epochs: int = Field(default=8, ge=1)
    dpo_beta: float = 0.1
    nll_weight: float = 0.5
    seed: int = 0


class PairModel(BaseModel):
    session_id: str
    query: str
    chosen: str
    rejected: str
    rules: list[str] = []


class SeqRecordModel(BaseModel):
    session_id: str
    input_query: str
    input_response: str
    target: str


class TrainRequest(BaseModel):
    objective: Literal["dpo_plus_nll", "nll"]
    cluster_id: int
    hyperparameters: HyperparamsModel = HyperparamsModel()
    pairs: list[PairModel] = []
    records: list[SeqRecordModel] = []
    validation_records: list[SeqRecordModel] = []
    init_from: Optional[str] = None


class GenerateRequest(BaseModel):
    adapter: Optional[str] = None
    messages: list[dict]
    temperature: float = 0.1
    max_tokens: int = 256


def _error(status: int, message: str, field_path: str = "") -> JSONResponse:
    payload = {"error": message}
    if field_path:
        payload["field"] = field_path
    return JSONResponse(status_code=status, content=payload)


class TrainerService:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.train_model = TinyCharLM(seed=seed)
        self.generate_model = TinyCharLM(seed=seed)
        self.adapters: dict[str, tuple[str, list[dict]]] = {}  # ref -> (kind, state)
        self.jobs: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._gen_lock = threading.Lock()
        self._queue: queue.Queue[str] = queue.Queue()
        self._worker = threading.Thread(target=self._work, daemon=True)
        self._worker.start()
        logger.info("trainer service ready (%d base parameters)", self.train_model.parameter_count())

    # -- job lifecycle

    def _job_id(self, spec: TrainRequest) -> str:
        canonical = json.dumps(spec.model_dump(), sort_keys=True)
        return hashlib.sha256(f"{self.seed}|{canonical}".encode("utf-8")).hexdigest()[:16]

    def submit(self, spec: TrainRequest) -> str:
        job_id = self._job_id(spec)
        with self._lock:
            if job_id in self.jobs:
                return job_id
            self.jobs[job_id] = {
                "job_id": job_id,
                "status": "queued",
                "message": "",
                "checkpoints": [],
                "spec": spec,
            }
        self._queue.put(job_id)
        return job_id

    def status(self, job_id: str) -> Optional[dict]:
        with self._lock:
            job = self.jobs.get(job_id)
            if job is None:
                return None
            return {
                "job_id": job["job_id"],
                "status": job["status"],
                "message": job["message"],
                "checkpoints": [dict(c) for c in job["checkpoints"]],
            }

    def _work(self) -> None:
        while True:
            job_id = self._queue.get()
            with self._lock:
                job = self.jobs[job_id]
                job["status"] = "running"
                spec: TrainRequest = job["spec"]
            try:
                checkpoints = self._train(job_id, spec)
            except Exception as exc:  # noqa: BLE001 - job failures become terminal status
                logger.exception("job %s failed", job_id)
                with self._lock:
                    self.jobs[job_id]["status"] = "failed"
                    self.jobs[job_id]["message"] = str(exc)
                continue
            with self._lock:
                self.jobs[job_id]["checkpoints"] = checkpoints
                self.jobs[job_id]["status"] = "done"

    def _train(self, job_id: str, spec: TrainRequest) -> list[dict]:
        hp = Hyperparams(**spec.hyperparameters.model_dump())
        job_seed = int(hashlib.sha256(job_id.encode()).hexdigest()[:8], 16) ^ hp.seed
        kind = "expert" if spec.objective == "dpo_plus_nll" else "critic"
        if spec.objective == "dpo_plus_nll":
            init_state = None
            if spec.init_from is not None:
                known = self.adapters.get(spec.init_from)
                if known is None:
                    raise ValueError(f"unknown adapter ref: {spec.init_from}")
                init_state = known[1]
            examples = [PairExample(p.query, p.chosen, p.rejected) for p in spec.pairs]
            trained = train_dpo_nll(self.train_model, examples, hp, job_seed, init_state)
        else:
            records = [
                SeqExample(critic_prompt(r.input_query, r.input_response), r.target)
                for r in spec.records
            ]
            validation = [
                SeqExample(critic_prompt(r.input_query, r.input_response), r.target)
                for r in spec.validation_records
            ]
            trained = train_nll(self.train_model, records, validation, hp, job_seed)

        checkpoints = []
        for ckpt in trained:
            ref = f"sidecar://{kind}/c{spec.cluster_id}/{job_id}/e{ckpt.epoch}"
            with self._lock:
                self.adapters[ref] = (kind, ckpt.adapter_state)
            checkpoints.append(
                {
                    "job_id": job_id,
                    "epoch": ckpt.epoch,
                    "backend_ref": ref,
                    "validation_loss": ckpt.validation_loss,
                    "metrics": ckpt.metrics,
                }
            )
        return checkpoints

    # -- generation

    def generate(self, request: GenerateRequest) -> str:
        prompt = "\n".join(m.get("content", "") for m in request.messages)
        state = None
        if request.adapter is not None:
            with self._lock:
                known = self.adapters.get(request.adapter)
            if known is None:
                raise KeyError(request.adapter)
            state = known[1]
        max_new = max(1, min(request.max_tokens, 64))
        gen_seed = int(hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:8], 16)
        with self._gen_lock:
            if state is None:
                self.generate_model.detach_adapter()
            else:
                self.generate_model.load_adapter_state(state)
            try:
                text = self.generate_model.generate(
                    prompt, max_new=max_new, temperature=request.temperature, seed=gen_seed
                )
            finally:
                self.generate_model.detach_adapter()
        return text or "."


def create_app(seed: int = 0) -> FastAPI:
    app = FastAPI(title="uno-trainer-sidecar")
    service = TrainerService(seed=seed)
    app.state.service = service

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        path = ".".join(str(p) for p in first.get("loc", ()) if p != "body")
        return _error(400, f"invalid request: {first.get('msg', 'validation error')}", path)

    @app.post("/train")
    def train(spec: TrainRequest):
        if spec.objective == "dpo_plus_nll":
            if not spec.pairs:
                return _error(400, "dpo_plus_nll jobs require preference pairs", "pairs")
            if spec.records:
                return _error(400, "dpo_plus_nll jobs must not carry sequence records", "records")
        else:
            if not spec.records:
                return _error(400, "nll jobs require (input, target) records", "records")
            if spec.pairs:
                return _error(400, "nll jobs must not carry preference pairs", "pairs")
        return {"job_id": service.submit(spec)}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        status = service.status(job_id)
        if status is None:
            return _error(404, f"unknown job id: {job_id}")
        return status

    @app.post("/generate")
    def generate(request: GenerateRequest):
        try:
            return {"text": service.generate(request)}
        except KeyError as exc:
            return _error(404, f"unknown adapter ref: {exc.args[0]}")

    @app.get("/health")
    def health():
        return {"status": "ok", "base_parameters": service.train_model.parameter_count()}

    return app
