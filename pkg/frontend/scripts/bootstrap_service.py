"""Build the test fixture the integration suite serves: a tiny cross-category
dataset and a quick checkpoint. Idempotent; artifacts land in .cache-test/."""

import json
import sys
from pathlib import Path

from partcomposer.registry import load_registry
from partcomposer.toyworld import ToySpec, generate_toy_dataset
from partcomposer.trainer import TrainConfig, Trainer

ROOT = Path(__file__).resolve().parent.parent / ".cache-test"


def main() -> int:
    marker = ROOT / "DONE"
    if marker.exists():
        print(str(ROOT))
        return 0
    ROOT.mkdir(parents=True, exist_ok=True)
    dataset = ROOT / "data"
    generate_toy_dataset(ToySpec(2, 4, canvas=64, layout_seed=0), dataset)
    # Two different categories so token mixing is a cross-category pick.
    for example_id, category in (("example_01", "chair"), ("example_02", "bed")):
        manifest_path = dataset / example_id / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["category"] = category
        manifest_path.write_text(json.dumps(manifest, indent=2))

    registry = load_registry(dataset)
    config = TrainConfig(
        stage1_steps=1, stage2_steps=0, resolution=64, timesteps=100,
        unet_base=16, text_dim=64, text_layers=1, adapter_rank=2,
        stage1_lr=1e-3, stage2_lr=1e-4, seed=0, dataset_root=str(dataset),
    )
    trainer = Trainer(registry, config, ROOT / "run")
    trainer.train()
    marker.write_text("ok")
    print(str(ROOT))
    return 0


if __name__ == "__main__":
    sys.exit(main())
