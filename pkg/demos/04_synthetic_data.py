"""Generate one phantom per task kind and write them as a dataset directory."""

import sys
from pathlib import Path

from mhmtl.data import generate, load_manifest, save_dataset
from mhmtl.tasks import TaskSpec

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_data")
tasks = [
    TaskSpec("seg", "Segmentation", num_classes=3),
    TaskSpec("cls", "Classification", num_classes=2),
    TaskSpec("det", "Detection"),
    TaskSpec("kp", "Regression", num_keypoints=3),
]
samples = [s for t in tasks for s in generate(7, t, 2)]
for s in samples:
    print(f"{s.id:>8}  {s.task.kind.value:<15} image {s.image.shape}")
save_dataset(samples, out)
again = load_manifest(out)
print(f"round trip through {out}/manifest.jsonl: {len(again)} records")
