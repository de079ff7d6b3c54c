"""HTTP generation service for the interactive editor.

The API is stateless: graphs are read-only on the server and every edit
lives client-side until it arrives inside a /generate request. Generation
jobs are queued FIFO onto a single device worker; responses embed the PNGs
base64-encoded in a JSON envelope together with the seed, guidance scale
and model checksum actually used.
"""

from __future__ import annotations

import base64
import io
import json
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from PIL import Image

from . import pipeline as pipeline_mod
from .checkpoint import CheckpointError
from .sg_core import GraphParseError, deserialize_graph, serialize_graph


@dataclass
class ServiceConfig:
    checkpoint_dir: str
    data_root: str | None = None
    host: str = "127.0.0.1"
    port: int = 8000
    timeout_s: float = 300.0
    max_batch: int = 16
    static_dir: str | None = None


class GenerationRequest(BaseModel):
    graph: dict
    n: int = Field(default=4, ge=1)
    omega: float = 2.0
    seed: int | None = None


def encode_image_png_bytes(image: np.ndarray) -> bytes:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    buffer = io.BytesIO()
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(buffer, format="PNG")
    return buffer.getvalue()


class _DeviceQueue:
    """Single worker consuming jobs in submission order."""

    def __init__(self):
        self.jobs: queue.Queue = queue.Queue()
        self.worker = threading.Thread(target=self._run, daemon=True)
        self.worker.start()

    def _run(self):
        while True:
            fn, done, slot = self.jobs.get()
            try:
                slot["result"] = fn()
            except Exception as exc:  # surfaced to the waiting request
                slot["error"] = exc
            finally:
                done.set()
                self.jobs.task_done()

    def submit(self, fn, timeout: float):
        done = threading.Event()
        slot: dict = {}
        self.jobs.put((fn, done, slot))
        if not done.wait(timeout):
            raise TimeoutError(f"generation did not finish within {timeout}s")
        if "error" in slot:
            raise slot["error"]
        return slot["result"]


def _index_dataset(data_root) -> dict[str, dict]:
    """Stable graph ids ('video__frame') mapped to on-disk paths."""
    index: dict[str, dict] = {}
    root = Path(data_root)
    if not root.is_dir():
        return index
    for graph_path in sorted(root.glob("*/*.graph.json")):
        frame_id = graph_path.name[: -len(".graph.json")]
        image_path = graph_path.with_name(f"{frame_id}.png")
        entry_id = f"{graph_path.parent.name}__{frame_id}"
        index[entry_id] = {
            "graph": graph_path,
            "image": image_path if image_path.exists() else None,
        }
    return index


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="scenediff generation service")
    started = time.monotonic()

    state = {
        "pipeline": None,
        "pipeline_error": None,
        "index": _index_dataset(config.data_root) if config.data_root else {},
        "queue": _DeviceQueue(),
    }
    try:
        state["pipeline"] = pipeline_mod.load_pipeline(config.checkpoint_dir)
    except CheckpointError as exc:
        state["pipeline_error"] = str(exc)

    app.state.scenediff = state
    app.state.config = config

    @app.get("/health")
    def health():
        root = Path(config.checkpoint_dir)
        checkpoints = {
            name: (root / name).exists()
            for name in pipeline_mod.STAGE_REQUIREMENTS["serve"]
        }
        ok = state["pipeline"] is not None
        return {
            "status": "ok" if ok else "degraded",
            "checkpoints": checkpoints,
            "missing": [name for name, present in checkpoints.items() if not present],
            "device": "cpu",
            "uptime_s": time.monotonic() - started,
        }

    @app.get("/graphs")
    def list_graphs():
        return {
            "graphs": [
                {"id": entry_id, "thumbnail": f"/graphs/{entry_id}/image"}
                for entry_id in state["index"]
            ]
        }

    def _entry_or_404(graph_id: str) -> dict:
        entry = state["index"].get(graph_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown graph id '{graph_id}'")
        return entry

    @app.get("/graphs/{graph_id}")
    def get_graph(graph_id: str):
        entry = _entry_or_404(graph_id)
        text = entry["graph"].read_text()
        return {
            "id": graph_id,
            "graph": json.loads(text),
            "image_ref": f"/graphs/{graph_id}/image" if entry["image"] else None,
        }

    @app.get("/graphs/{graph_id}/image")
    def get_graph_image(graph_id: str):
        entry = _entry_or_404(graph_id)
        if entry["image"] is None:
            raise HTTPException(status_code=404, detail="no image for this graph")
        return Response(content=entry["image"].read_bytes(), media_type="image/png")

    @app.post("/generate")
    def generate(request: GenerationRequest):
        if state["pipeline"] is None:
            raise HTTPException(
                status_code=503,
                detail=f"model unavailable: {state['pipeline_error']}",
            )
        if not 1 <= request.n <= config.max_batch:
            raise HTTPException(
                status_code=400, detail=f"n must lie in [1, {config.max_batch}]"
            )
        if not np.isfinite(request.omega):
            raise HTTPException(status_code=400, detail="omega must be finite")
        try:
            graph = deserialize_graph(json.dumps(request.graph))
        except GraphParseError as exc:
            raise HTTPException(
                status_code=400,
                detail={"message": str(exc), "field": exc.field},
            ) from exc

        seed = request.seed
        if seed is None:
            seed = int(np.random.default_rng().integers(0, 2**31 - 1))
        sampler = state["pipeline"]

        def job():
            return sampler.sample(graph, n=request.n, omega=request.omega, seed=seed)

        try:
            images = state["queue"].submit(job, timeout=config.timeout_s)
        except TimeoutError as exc:
            raise HTTPException(status_code=504, detail=str(exc)) from exc

        payload = [
            base64.b64encode(encode_image_png_bytes(image)).decode("ascii")
            for image in images
        ]
        return JSONResponse(
            {
                "images": payload,
                "metadata": {
                    "seed": seed,
                    "omega": request.omega,
                    "n": request.n,
                    "model_checksum": sampler.checksum,
                    "graph": json.loads(serialize_graph(graph)),
                },
            }
        )

    if config.static_dir and Path(config.static_dir).is_dir():
        app.mount("/", StaticFiles(directory=config.static_dir, html=True), name="editor")

    return app
