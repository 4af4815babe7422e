"""Train a small two-task model for a few hundred steps and evaluate it."""

from mhmtl.config import OptimConfig, RunConfig
from mhmtl.data import generate
from mhmtl.engine import evaluate, train
from mhmtl.model import ModelConfig
from mhmtl.tasks import TaskSpec

tasks = [TaskSpec("lesion", "Segmentation", num_classes=2), TaskSpec("plane", "Classification", num_classes=3)]
cfg = RunConfig(
    model=ModelConfig(input_size=(64, 64), tasks=tasks),
    optim=OptimConfig(steps=300, batch_size=8, eval_every=0),
    seed=1,
)
train_set = {t.subtask_id: generate(0, t, 16, size_range=(200, 300)) for t in tasks}
val_set = {t.subtask_id: generate(1, t, 6, size_range=(200, 300)) for t in tasks}

result = train(cfg, train_set, val_set, record_lr=True)
for rec in result.losses[::50]:
    print(f"step {rec['step']:>3}  {rec['subtask']:>6}  loss {rec['loss']:.4f}")
print("lr at first/last step:", result.lr_trace[0], result.lr_trace[-1])
print(evaluate(result.model, [s for v in val_set.values() for s in v]).to_text())
