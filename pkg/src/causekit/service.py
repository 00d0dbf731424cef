"""HTTP reward service for external RL training loops.

Ground truth loads once at startup and never changes; scoring is
stateless per request, so concurrent batches cannot contaminate each
other and identical payloads always produce identical responses.
"""

from __future__ import annotations

from fastapi import FastAPI, Header, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .dataset import DatasetError, load_dataset
from .reward import DEFAULT_THRESHOLD, RewardWeights, score_batch

SCHEMA_VERSION = 1


class ScoreItem(BaseModel):
    img_id: int
    prediction_text: str


class ScoreRequest(BaseModel):
    v: int = SCHEMA_VERSION
    items: list[ScoreItem] = Field(default_factory=list)
    weights: list[float] | None = None  # [lambda_r, lambda_p, lambda_f]
    threshold: float | None = None


class RewardService:
    """Owns the ground-truth snapshot and scoring defaults."""

    def __init__(self, dataset_path: str,
                 weights: RewardWeights = RewardWeights(),
                 threshold: float = DEFAULT_THRESHOLD,
                 batch_cap: int = 256,
                 max_body_bytes: int = 8_000_000,
                 token: str | None = None):
        self.dataset_path = dataset_path
        self.weights = weights
        self.threshold = threshold
        self.batch_cap = batch_cap
        self.max_body_bytes = max_body_bytes
        self.token = token
        self.status = "loading"
        self.reason: str | None = None
        self.records_loaded = 0
        self._graphs: dict = {}

    def load(self) -> None:
        try:
            records, issues = load_dataset(self.dataset_path)
        except DatasetError as exc:
            self.status = "degraded"
            self.reason = str(exc)
            return
        if not records:
            self.status = "degraded"
            self.reason = (f"no usable records in {self.dataset_path} "
                           f"({len(issues)} validation issues)")
            return
        self._graphs = {r.img_id: r.graph for r in records}
        self.records_loaded = len(self._graphs)
        self.status = "ok"

    def health(self) -> dict:
        body = {"status": self.status, "records_loaded": self.records_loaded,
                "version": SCHEMA_VERSION}
        if self.reason:
            body["reason"] = self.reason
        return body

    def score(self, request: ScoreRequest) -> dict:
        weights = self.weights
        if request.weights is not None:
            if len(request.weights) != 3:
                raise ValueError("weights must be [lambda_r, lambda_p, lambda_f]")
            weights = RewardWeights(*request.weights)
        threshold = (request.threshold if request.threshold is not None
                     else self.threshold)
        results = score_batch(
            [(item.prediction_text, item.img_id) for item in request.items],
            self._graphs, weights, threshold)
        scores: list = []
        errors: list = []
        for item, result in zip(request.items, results):
            if result.breakdown is None:
                scores.append(None)
                errors.append({"index": result.index, "img_id": item.img_id,
                               "message": result.error})
            else:
                b = result.breakdown
                scores.append({
                    "img_id": item.img_id,
                    "recall_term": b.recall_term,
                    "precision_term": b.precision_term,
                    "format_term": b.format_term,
                    "total": b.total,
                })
        return {"v": SCHEMA_VERSION, "scores": scores, "errors": errors}


def create_app(service: RewardService) -> FastAPI:
    app = FastAPI(title="causal reward service")

    @app.get("/v1/health")
    def health():
        return service.health()

    @app.post("/v1/score")
    def score(body: ScoreRequest, request: Request,
              x_api_token: str | None = Header(default=None)):
        if service.token is not None and x_api_token != service.token:
            return JSONResponse(status_code=401,
                                content={"detail": "missing or wrong token"})
        length = request.headers.get("content-length")
        if length and int(length) > service.max_body_bytes:
            return JSONResponse(status_code=413,
                                content={"detail": "request body too large"})
        if service.status != "ok":
            return JSONResponse(
                status_code=503,
                content={"detail": f"service is {service.status}",
                         "reason": service.reason})
        if len(body.items) > service.batch_cap:
            return JSONResponse(
                status_code=413,
                content={"detail": f"batch of {len(body.items)} exceeds the "
                                   f"cap of {service.batch_cap}"})
        try:
            return service.score(body)
        except ValueError as exc:
            return JSONResponse(status_code=422, content={"detail": str(exc)})

    return app


def serve(dataset_path: str, host: str = "127.0.0.1", port: int = 8080,
          weights: RewardWeights = RewardWeights(),
          threshold: float = DEFAULT_THRESHOLD, batch_cap: int = 256,
          token: str | None = None) -> None:
    """Blocking entry point: load ground truth, then serve until killed."""
    import uvicorn

    service = RewardService(dataset_path, weights, threshold,
                            batch_cap=batch_cap, token=token)
    service.load()
    uvicorn.run(create_app(service), host=host, port=port)
