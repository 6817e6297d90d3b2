import io
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from partcomposer.checkpoint import load_checkpoint
from partcomposer.service import (
    CompositionRequest,
    UnknownTokenError,
    compose,
    compose_prompt,
    create_app,
)
from partcomposer.trainer import TrainConfig, Trainer


@pytest.fixture(scope="module")
def service_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("svc")
    from partcomposer.registry import load_registry
    from partcomposer.toyworld import ToySpec, generate_toy_dataset

    dataset = generate_toy_dataset(ToySpec(2, 4, canvas=64, layout_seed=0), out / "data")
    registry = load_registry(dataset)
    config = TrainConfig(
        stage1_steps=1, stage2_steps=0, resolution=64, timesteps=100,
        unet_base=16, text_dim=64, text_layers=1, adapter_rank=2,
        stage1_lr=1e-3, stage2_lr=1e-4, seed=0, dataset_root=str(dataset),
    )
    trainer = Trainer(registry, config, out / "run")
    return trainer.train()


@pytest.fixture(scope="module")
def bundle(service_checkpoint):
    return load_checkpoint(service_checkpoint)


@pytest.fixture(scope="module")
def client(service_checkpoint):
    app = create_app(service_checkpoint)
    with TestClient(app) as c:
        yield c


def wait_for(client, job_id, timeout=60.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status = client.get(f"/jobs/{job_id}").json()
        if status["status"] in ("done", "failed"):
            return status
        time.sleep(0.05)
    raise TimeoutError(f"job {job_id} did not finish")


class TestComposeFunction:
    def test_full_selection_prompt(self, bundle):
        request = CompositionRequest(
            selections={"part1": "<v2>", "part2": "<v5>", "part3": "<v7>", "part4": "<v8>"},
            count=1, seed=0, steps=2,
        )
        assert compose_prompt(request, bundle) == (
            "A photo of a partial object with <v2>, <v5>, <v7>, <v8>, "
            "on a clean white background."
        )

    def test_partial_selection_allowed(self, bundle):
        request = CompositionRequest(selections={"part1": "<v1>", "part3": "<v7>"}, steps=2)
        prompt = compose_prompt(request, bundle)
        assert "<v1>" in prompt and "<v7>" in prompt
        assert "<v2>" not in prompt

    def test_tokens_sorted_ascending(self, bundle):
        request = CompositionRequest(selections={"b": "<v7>", "a": "<v2>"}, steps=2)
        prompt = compose_prompt(request, bundle)
        assert prompt.index("<v2>") < prompt.index("<v7>")

    def test_unknown_token_rejected(self, bundle):
        request = CompositionRequest(selections={"part1": "<v99>"}, steps=2)
        with pytest.raises(UnknownTokenError, match="<v99>"):
            compose_prompt(request, bundle)

    def test_count_and_seed_derivation(self, bundle):
        request = CompositionRequest(selections={"part1": "<v1>"}, count=3, seed=11, steps=2)
        images, metadata = compose(request, bundle)
        assert images.shape == (3, 64, 64, 3)
        assert [m["seed"] for m in metadata] == [11, 12, 13]
        assert len({m["prompt"] for m in metadata}) == 1

    def test_prompt_is_pure_function_of_request(self, bundle):
        request = CompositionRequest(selections={"part2": "<v6>", "part1": "<v1>"}, steps=2)
        assert compose_prompt(request, bundle) == compose_prompt(request, bundle)

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            CompositionRequest(selections={"a": "<v1>"}, count=0)

    def test_registry_token_mismatch(self, bundle, tmp_path):
        from partcomposer.registry import load_registry
        from partcomposer.toyworld import ToySpec, generate_toy_dataset

        other = load_registry(generate_toy_dataset(ToySpec(1, 2, canvas=64, layout_seed=5), tmp_path / "o"))
        request = CompositionRequest(selections={"part1": "<v1>"}, steps=2)
        with pytest.raises(ValueError, match="token table"):
            compose(request, bundle, registry=other)


class TestConceptsEndpoint:
    def test_lists_examples_slots_tokens(self, client):
        payload = client.get("/concepts").json()
        assert payload["category"] == "object"
        assert payload["tokens"] == [f"<v{i}>" for i in range(1, 9)]
        assert len(payload["examples"]) == 2
        first = payload["examples"][0]
        assert [s["slot"] for s in first["slots"]] == ["part1", "part2", "part3", "part4"]
        assert first["thumbnail_url"].startswith("/thumbnails/")

    def test_thumbnails_served(self, client):
        payload = client.get("/concepts").json()
        example = payload["examples"][0]
        img = client.get(example["thumbnail_url"])
        assert img.status_code == 200
        assert img.headers["content-type"] == "image/png"
        decoded = Image.open(io.BytesIO(img.content))
        assert decoded.size == (64, 64)
        mask = client.get(example["slots"][0]["mask_url"])
        assert mask.status_code == 200


class TestComposeEndpoint:
    def test_submit_and_complete(self, client):
        body = {"selections": {"part1": "<v1>", "part2": "<v6>"}, "count": 2, "seed": 5, "steps": 2}
        reply = client.post("/compose", json=body).json()
        assert "job_id" in reply
        assert reply["prompt"].startswith("A photo of a partial object with <v1>, <v6>")
        status = wait_for(client, reply["job_id"])
        assert status["status"] == "done"
        assert len(status["image_ids"]) == 2
        assert status["prompt"] == reply["prompt"]
        image = client.get(f"/images/{status['image_ids'][0]}")
        assert image.status_code == 200
        assert image.headers["content-type"] == "image/png"
        decoded = Image.open(io.BytesIO(image.content))
        assert decoded.size == (64, 64)
        meta = client.get(f"/images/{status['image_ids'][0]}/meta").json()
        assert meta["seed"] == 5 and meta["steps"] == 2

    def test_unknown_token_is_422_with_token_named(self, client):
        body = {"selections": {"part1": "<v42>"}, "steps": 2}
        response = client.post("/compose", json=body)
        assert response.status_code == 422
        assert "<v42>" in response.json()["detail"]

    def test_bad_count_is_422(self, client):
        response = client.post("/compose", json={"selections": {"part1": "<v1>"}, "count": 0})
        assert response.status_code == 422

    def test_unknown_job_404(self, client):
        assert client.get("/jobs/deadbeef").status_code == 404

    def test_unknown_image_404(self, client):
        assert client.get("/images/deadbeef").status_code == 404

    def test_two_concurrent_jobs_fifo(self, client):
        body1 = {"selections": {"part1": "<v1>"}, "count": 1, "seed": 1, "steps": 2}
        body2 = {"selections": {"part2": "<v2>"}, "count": 1, "seed": 2, "steps": 2}
        id1 = client.post("/compose", json=body1).json()["job_id"]
        id2 = client.post("/compose", json=body2).json()["job_id"]
        s1 = wait_for(client, id1)
        s2 = wait_for(client, id2)
        assert s1["status"] == "done" and s2["status"] == "done"
        store = client.app.state.store
        assert store.get(id1).started_index < store.get(id2).started_index

    def test_job_determinism_same_seed(self, client):
        body = {"selections": {"part3": "<v3>"}, "count": 1, "seed": 77, "steps": 3}
        ids = []
        for _ in range(2):
            job_id = client.post("/compose", json=body).json()["job_id"]
            status = wait_for(client, job_id)
            ids.append(status["image_ids"][0])
        a = client.get(f"/images/{ids[0]}").content
        b = client.get(f"/images/{ids[1]}").content
        assert a == b

    def test_job_states_progress_only_forward(self, client):
        body = {"selections": {"part1": "<v5>"}, "count": 1, "seed": 1, "steps": 2}
        job_id = client.post("/compose", json=body).json()["job_id"]
        seen = set()
        for _ in range(200):
            state = client.get(f"/jobs/{job_id}").json()["status"]
            seen.add(state)
            if state == "done":
                break
            time.sleep(0.02)
        assert "done" in seen
        assert seen <= {"queued", "running", "done"}


class TestWriteImages:
    def test_png_and_sidecar_json(self, bundle, tmp_path):
        from partcomposer.service import write_images

        request = CompositionRequest(selections={"part1": "<v1>"}, count=2, seed=3, steps=2)
        images, metadata = compose(request, bundle)
        paths = write_images(images, metadata, tmp_path / "out")
        assert len(paths) == 2
        for p in paths:
            assert p.exists()
            sidecar = json.loads(p.with_suffix(".json").read_text())
            assert set(sidecar) >= {"prompt", "seed", "steps", "guidance", "selections"}
