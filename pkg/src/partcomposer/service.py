"""Compositional generation: prompt building, batch sampling, and the HTTP
API consumed by the composition studio.

Generation requests become jobs on a single FIFO worker queue; the API layer
stays responsive while images render.  Every image carries sidecar metadata
(prompt, seed, steps, guidance) sufficient to reproduce it bit-exactly.
"""

from __future__ import annotations

import io
import json
import secrets
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel

from .backend.sampler import ddim_sample
from .checkpoint import CheckpointBundle, load_checkpoint
from .registry import ConceptRegistry, load_registry
from .synthesis import build_inference_prompt


class ComposeBody(BaseModel):
    """JSON body of POST /compose."""

    selections: dict[str, str]
    count: int = 1
    seed: int | None = None
    steps: int = 50
    guidance: float = 7.5
    background_token: str | None = None


class UnknownTokenError(ValueError):
    def __init__(self, token: str):
        super().__init__(f"unknown token: {token}")
        self.token = token


@dataclass
class CompositionRequest:
    """A (possibly partial) slot -> token selection plus sampler settings."""

    selections: dict[str, str]
    count: int = 1
    seed: int | None = None
    steps: int = 50
    guidance: float = 7.5
    background_token: str | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not self.selections:
            raise ValueError("at least one slot must be selected")


def _validate_tokens(request: CompositionRequest, bundle: CheckpointBundle) -> list[str]:
    known = set(bundle.part_tokens)
    for token in request.selections.values():
        if token not in known:
            raise UnknownTokenError(token)
    if request.background_token is not None:
        bg = set(bundle.manifest["registry"].get("background_tokens", []))
        if request.background_token not in bg:
            raise UnknownTokenError(request.background_token)
    order = {tok: i for i, tok in enumerate(bundle.part_tokens)}
    return sorted(request.selections.values(), key=lambda tok: order[tok])


def compose_prompt(request: CompositionRequest, bundle: CheckpointBundle) -> str:
    """The exact prompt the sampler will see: a pure function of the request
    and the checkpoint's token table."""
    tokens = _validate_tokens(request, bundle)
    return build_inference_prompt(bundle.category, tokens, request.background_token)


def compose(
    request: CompositionRequest,
    checkpoint: str | Path | CheckpointBundle,
    registry: ConceptRegistry | None = None,
) -> tuple[np.ndarray, list[dict]]:
    """Sample ``request.count`` images for a part selection.

    Returns the image stack and one metadata record per image.  When a
    registry is supplied its token table must match the checkpoint's.
    """
    bundle = checkpoint if isinstance(checkpoint, CheckpointBundle) else load_checkpoint(checkpoint)
    if registry is not None and list(registry.part_tokens) != bundle.part_tokens:
        raise ValueError("registry token table does not match the checkpoint")
    prompt = compose_prompt(request, bundle)
    seed = request.seed if request.seed is not None else secrets.randbelow(2**31)
    images = ddim_sample(
        bundle.backbone,
        prompt,
        steps=request.steps,
        guidance_scale=request.guidance,
        seed=seed,
        count=request.count,
    )
    metadata = [
        {
            "prompt": prompt,
            "seed": seed + i,
            "steps": request.steps,
            "guidance": request.guidance,
            "selections": dict(request.selections),
        }
        for i in range(request.count)
    ]
    return images, metadata


# ---------------------------------------------------------------------------
# Job store and HTTP app
# ---------------------------------------------------------------------------

JOB_STATES = ("queued", "running", "done", "failed")


@dataclass
class Job:
    job_id: str
    request: CompositionRequest
    prompt: str
    status: str = "queued"
    image_ids: list[str] = field(default_factory=list)
    error: str | None = None
    created_at: float = field(default_factory=time.time)
    started_at: float | None = None
    finished_at: float | None = None
    started_index: int | None = None  # order in which the worker picked it up


class JobStore:
    """Thread-safe job registry with a FIFO queue and in-memory image store."""

    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict[str, Job] = {}
        self._queue: deque[str] = deque()
        self._images: dict[str, tuple[bytes, dict]] = {}
        self._started_counter = 0
        self.wakeup = threading.Event()

    def submit(self, request: CompositionRequest, prompt: str) -> Job:
        job = Job(job_id=secrets.token_hex(8), request=request, prompt=prompt)
        with self._lock:
            self._jobs[job.job_id] = job
            self._queue.append(job.job_id)
        self.wakeup.set()
        return job

    def next_queued(self) -> Job | None:
        with self._lock:
            if not self._queue:
                return None
            job = self._jobs[self._queue.popleft()]
            job.status = "running"
            job.started_at = time.time()
            job.started_index = self._started_counter
            self._started_counter += 1
            return job

    def finish(self, job: Job, image_ids: list[str] | None, error: str | None = None):
        with self._lock:
            if error is None:
                job.status = "done"
                job.image_ids = image_ids or []
            else:
                job.status = "failed"
                job.error = error
            job.finished_at = time.time()

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def put_image(self, image_id: str, png: bytes, meta: dict):
        with self._lock:
            self._images[image_id] = (png, meta)

    def get_image(self, image_id: str) -> tuple[bytes, dict] | None:
        with self._lock:
            return self._images.get(image_id)


def _png_bytes(arr: np.ndarray, mode: str | None = None) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    checkpoint: str | Path | CheckpointBundle,
    registry: ConceptRegistry | None = None,
    dataset_root: str | Path | None = None,
):
    """Build the FastAPI app plus its generation worker thread.

    The registry (loaded from ``dataset_root`` or the checkpoint's recorded
    root when omitted) powers the thumbnail endpoints; without one the
    concept listing still works from the checkpoint's token table.
    """
    bundle = checkpoint if isinstance(checkpoint, CheckpointBundle) else load_checkpoint(checkpoint)
    if registry is None:
        root = dataset_root or bundle.manifest["registry"].get("dataset_root")
        if root and Path(root).is_dir():
            registry = load_registry(root)
    if registry is not None and list(registry.part_tokens) != bundle.part_tokens:
        raise ValueError("registry token table does not match the checkpoint")

    store = JobStore()
    app = FastAPI(title="partcomposer")
    app.state.store = store
    app.state.bundle = bundle

    def worker_loop():
        while True:
            job = store.next_queued()
            if job is None:
                store.wakeup.wait(timeout=0.05)
                store.wakeup.clear()
                continue
            try:
                images, metadata = compose(job.request, bundle, registry=None)
                ids = []
                for i, (image, meta) in enumerate(zip(images, metadata)):
                    image_id = f"{job.job_id}_{i:03d}"
                    store.put_image(image_id, _png_bytes(image), meta)
                    ids.append(image_id)
                store.finish(job, ids)
            except Exception as err:  # surface generation failures in job state
                store.finish(job, None, error=str(err))

    threading.Thread(target=worker_loop, daemon=True, name="compose-worker").start()

    @app.get("/concepts")
    def concepts():
        token_table = bundle.token_table
        by_example: dict[str, list[tuple[str, str]]] = {}
        for token in bundle.part_tokens:
            example_id, slot = token_table[token]
            by_example.setdefault(example_id, []).append((slot, token))
        has_images = registry is not None
        examples = []
        for example_id, slots in by_example.items():
            category = (
                registry.example(example_id).category if has_images else bundle.category
            )
            examples.append(
                {
                    "example_id": example_id,
                    "category": category,
                    "thumbnail_url": f"/thumbnails/{example_id}" if has_images else None,
                    "slots": [
                        {
                            "slot": slot,
                            "token": token,
                            "mask_url": f"/thumbnails/{example_id}/{slot}" if has_images else None,
                        }
                        for slot, token in slots
                    ],
                }
            )
        return {
            "category": bundle.category,
            "examples": examples,
            "tokens": bundle.part_tokens,
            "background_tokens": bundle.manifest["registry"].get("background_tokens", []),
        }

    @app.post("/compose")
    def submit_compose(body: ComposeBody):
        try:
            request = CompositionRequest(
                selections=body.selections,
                count=body.count,
                seed=body.seed,
                steps=body.steps,
                guidance=body.guidance,
                background_token=body.background_token,
            )
            prompt = compose_prompt(request, bundle)
        except UnknownTokenError as err:
            raise HTTPException(status_code=422, detail=str(err))
        except ValueError as err:
            raise HTTPException(status_code=422, detail=str(err))
        job = store.submit(request, prompt)
        return {"job_id": job.job_id, "status": job.status, "prompt": prompt}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        job = store.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job: {job_id}")
        images = []
        for image_id in job.image_ids:
            item = store.get_image(image_id)
            if item:
                images.append({"image_id": image_id, **item[1]})
        return {
            "job_id": job.job_id,
            "status": job.status,
            "prompt": job.prompt,
            "image_ids": job.image_ids,
            "images": images,
            "error": job.error,
        }

    @app.get("/images/{image_id}")
    def image_bytes(image_id: str):
        item = store.get_image(image_id)
        if item is None:
            raise HTTPException(status_code=404, detail=f"unknown image: {image_id}")
        return Response(content=item[0], media_type="image/png")

    @app.get("/images/{image_id}/meta")
    def image_meta(image_id: str):
        item = store.get_image(image_id)
        if item is None:
            raise HTTPException(status_code=404, detail=f"unknown image: {image_id}")
        return item[1]

    @app.get("/thumbnails/{example_id}")
    def thumbnail(example_id: str):
        if registry is None:
            raise HTTPException(status_code=404, detail="no dataset available for thumbnails")
        try:
            example = registry.example(example_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown example: {example_id}")
        return Response(content=_png_bytes(example.image), media_type="image/png")

    @app.get("/thumbnails/{example_id}/{slot}")
    def mask_thumbnail(example_id: str, slot: str):
        if registry is None:
            raise HTTPException(status_code=404, detail="no dataset available for thumbnails")
        try:
            example = registry.example(example_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown example: {example_id}")
        for part in example.parts:
            if part.slot_name == slot:
                return Response(
                    content=_png_bytes(part.mask.astype(np.uint8) * 255, mode="L"),
                    media_type="image/png",
                )
        raise HTTPException(status_code=404, detail=f"unknown slot: {slot}")

    return app


def serve(
    checkpoint: str | Path,
    port: int = 8000,
    host: str = "127.0.0.1",
    dataset_root: str | Path | None = None,
):
    """Run the composition service until interrupted."""
    import uvicorn

    app = create_app(checkpoint, dataset_root=dataset_root)
    uvicorn.run(app, host=host, port=port, log_level="info")


def write_images(
    images: np.ndarray, metadata: list[dict], out_dir: str | Path, prefix: str = "sample"
) -> list[Path]:
    """PNG + sidecar JSON pairs for a batch of composed images."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (image, meta) in enumerate(zip(images, metadata)):
        path = out / f"{prefix}_{i:03d}.png"
        Image.fromarray(image).save(path)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        paths.append(path)
    return paths
