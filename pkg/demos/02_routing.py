"""One shared encoder, one head per subtask; gradients only reach the routed head."""

import numpy as np

from mhmtl import autodiff as ad
from mhmtl.data import collate, generate, resize_to_model
from mhmtl.losses import composite
from mhmtl.model import ModelConfig, MultiTaskNet, RoutingError
from mhmtl.tasks import TaskSpec

tasks = [
    TaskSpec("plaque", "Segmentation", num_classes=2),
    TaskSpec("view", "Classification", num_classes=4),
    TaskSpec("fetal_head", "Detection"),
    TaskSpec("ivs", "Regression", num_keypoints=2),
]
model = MultiTaskNet(ModelConfig(input_size=(64, 64), encoder_widths=(4, 6, 8, 8, 12), fpn_channels=8, tasks=tasks))

images = np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)
for t in tasks:
    print(f"{t.subtask_id:>10} ({t.kind.value}): output {model(images, t.subtask_id).shape}")

batch = collate([resize_to_model(s, (64, 64)) for s in generate(0, tasks[1], 2)])
ad.backward(composite(batch, model(batch.images, "view")))
touched = sorted({n.split(".")[1] for n, p in model.params.items() if n.startswith("heads.") and p.grad is not None})
print("heads with gradients after a 'view' step:", touched)

try:
    model(images, "carotid")
except RoutingError as exc:
    print("unknown subtask:", exc)
