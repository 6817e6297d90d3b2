"""Command-line entry points.

    partcomposer toy-gen --out data/ --examples 2 --parts 4
    partcomposer synth-preview --dataset data/ --seed 0 --count 8 --out preview/
    partcomposer train --dataset data/ --config config.json --out run/
    partcomposer resume --checkpoint run/final --out run2/
    partcomposer compose --checkpoint run/final --select part1=<v1> --count 4 --out out/
    partcomposer predict-concepts --checkpoint run/final --image img.png --out masks/
    partcomposer serve --checkpoint run/final --port 8000
    partcomposer evaluate --checkpoint run/final --dataset data/ --out report/
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image


def _add_toy_gen(sub):
    p = sub.add_parser("toy-gen", help="generate a procedural toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file with ToySpec fields")
    p.add_argument("--examples", type=int, default=2)
    p.add_argument("--parts", type=int, default=4)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--category", default="object")
    p.set_defaults(func=_run_toy_gen)


def _run_toy_gen(args):
    from .toyworld import ToySpec, generate_toy_dataset

    if args.spec:
        spec = ToySpec(**json.loads(Path(args.spec).read_text()))
    else:
        spec = ToySpec(
            num_examples=args.examples,
            parts_per_example=args.parts,
            canvas=args.canvas,
            layout_seed=args.seed,
            category=args.category,
        )
    root = generate_toy_dataset(spec, args.out)
    print(f"wrote toy dataset with {spec.num_examples} examples to {root}")


def _add_synth_preview(sub):
    p = sub.add_parser("synth-preview", help="write synthesized samples for inspection")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=None, help="canvas size (defaults to image size)")
    p.set_defaults(func=_run_synth_preview)


def _overlay(image: np.ndarray, masks: dict[str, np.ndarray]) -> np.ndarray:
    out = image.astype(np.float32).copy()
    colors = [(255, 0, 0), (0, 200, 0), (0, 80, 255), (255, 160, 0), (200, 0, 255), (0, 220, 220)]
    for i, mask in enumerate(masks.values()):
        c = np.array(colors[i % len(colors)], dtype=np.float32)
        out[mask] = 0.5 * out[mask] + 0.5 * c
    return out.clip(0, 255).astype(np.uint8)


def _run_synth_preview(args):
    from .registry import load_registry
    from .synthesis import SynthesisConfig, make_batch

    registry = load_registry(args.dataset)
    resolution = args.resolution or registry.examples[0].image.shape[0]
    config = SynthesisConfig(canvas_size=resolution)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prompts = {}
    for i in range(args.count):
        for sample in make_batch(registry, rng, config):
            stem = f"{i:03d}_{sample.kind}"
            Image.fromarray(sample.image).save(out / f"{stem}.png")
            Image.fromarray(_overlay(sample.image, sample.part_masks)).save(
                out / f"{stem}_masks.png"
            )
            prompts[stem] = sample.prompt
    (out / "prompts.json").write_text(json.dumps(prompts, indent=2))
    print(f"wrote {args.count} batches to {out}")


def _add_train(sub):
    p = sub.add_parser("train", help="run the two-stage training schedule")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="flat JSON file mirroring TrainConfig")
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain-steps", type=int, default=0,
                   help="toy base pretraining steps before the two-stage schedule")
    p.add_argument("--pretrain-lr", type=float, default=2e-3)
    p.set_defaults(func=_run_train)


def _run_train(args):
    from .registry import load_registry
    from .trainer import TrainConfig, Trainer, pretrain_toy_base

    device = os.environ.get("PARTCOMPOSER_DEVICE", "cpu")
    if device != "cpu":
        print(f"accelerator override: {device} (toy backbone runs on cpu)", file=sys.stderr)

    registry = load_registry(args.dataset)
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    config.dataset_root = str(Path(args.dataset).resolve())

    if args.pretrain_steps and not config.base_init:
        base_path = Path(args.out) / "toy_base.pt"
        print(f"pretraining toy base for {args.pretrain_steps} steps -> {base_path}")
        pretrain_toy_base(registry, config, args.pretrain_steps, base_path, lr=args.pretrain_lr)
        config.base_init = str(base_path)

    trainer = Trainer(registry, config, args.out)
    final = trainer.train()
    print(f"training complete; final checkpoint: {final}")


def _add_resume(sub):
    p = sub.add_parser("resume", help="continue training from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="override the dataset root recorded in the checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_run_resume)


def _run_resume(args):
    from .registry import load_registry
    from .trainer import Trainer

    registry = load_registry(args.dataset) if args.dataset else None
    trainer = Trainer.resume(args.checkpoint, registry=registry, out_dir=args.out)
    final = trainer.train()
    print(f"training complete; final checkpoint: {final}")


def _parse_selections(pairs: list[str]) -> dict[str, str]:
    selections = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"--select expects slot=token, got {pair!r}")
        slot, token = pair.split("=", 1)
        selections[slot] = token
    return selections


def _add_compose(sub):
    p = sub.add_parser("compose", help="sample images for a part selection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--select", action="append", default=[], metavar="slot=token")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--background", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_run_compose)


def _run_compose(args):
    from .service import CompositionRequest, compose, write_images

    request = CompositionRequest(
        selections=_parse_selections(args.select),
        count=args.count,
        seed=args.seed,
        steps=args.steps,
        guidance=args.guidance,
        background_token=args.background,
    )
    images, metadata = compose(request, args.checkpoint)
    paths = write_images(images, metadata, args.out)
    print(f"wrote {len(paths)} images to {args.out}")
    print(f"prompt: {metadata[0]['prompt']}")


def _add_predict_concepts(sub):
    p = sub.add_parser("predict-concepts", help="run the concept predictor on an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timestep", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_run_predict_concepts)


def _run_predict_concepts(args):
    import torch

    from .backend.schedule import forward_process, one_step_denoise
    from .checkpoint import load_checkpoint

    bundle = load_checkpoint(args.checkpoint)
    backbone, predictor = bundle.backbone, bundle.predictor
    image = np.asarray(Image.open(args.image).convert("RGB"))

    t = args.timestep or backbone.schedule.num_steps // 2
    with torch.no_grad():
        z0 = backbone.encode_image(image).unsqueeze(0)
        g = torch.Generator().manual_seed(args.seed)
        eps = torch.randn(z0.shape, generator=g)
        state = forward_process(z0, torch.tensor([t]), eps, backbone.schedule)
        enc = backbone.encode_prompt("")
        eps_hat, _ = backbone.predict_noise(state.z_t, state.t, [enc])
        z_tilde = one_step_denoise(state, eps_hat).z_tilde
        pred = predictor(z_tilde)
        probs = torch.sigmoid(pred.seg_logits[0]).numpy()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    class_probs = {}
    for i, token in enumerate(bundle.part_tokens):
        channel = (np.clip(probs[i], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(channel, mode="L").save(out / f"{token.strip('<>')}.png")
        class_probs[token] = float(pred.class_probs[0, i])
    (out / "class_probs.json").write_text(json.dumps(class_probs, indent=2))
    print(f"wrote {len(bundle.part_tokens)} concept masks to {out}")


def _add_serve(sub):
    p = sub.add_parser("serve", help="run the composition HTTP service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--dataset", default=None)
    p.set_defaults(func=_run_serve)


def _run_serve(args):
    from .service import serve

    serve(args.checkpoint, port=args.port, host=args.host, dataset_root=args.dataset)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="run the sampling protocol and write a report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--samples-per-combo", type=int, default=36)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_run_evaluate)


def _run_evaluate(args):
    from .evaluation import run_protocol
    from .registry import load_registry

    registry = load_registry(args.dataset)
    report = run_protocol(
        registry,
        args.checkpoint,
        samples_per_combo=args.samples_per_combo,
        steps=args.steps,
        guidance=args.guidance,
        seed=args.seed,
        out_dir=args.out,
    )
    print(f"wrote report with {report['total_images']} image records to {args.out}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="partcomposer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (
        _add_toy_gen,
        _add_synth_preview,
        _add_train,
        _add_resume,
        _add_compose,
        _add_predict_concepts,
        _add_serve,
        _add_evaluate,
    ):
        add(sub)
    args = parser.parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
