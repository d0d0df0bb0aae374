"""
Staged training on a small phantom set
======================================

Four stages, each starting from the previous checkpoint:

1. backbone + decoder learn the lung mask
2. the alignment regressor learns to undo random affine warps (mask only)
3. the scoring head learns the 3x2 severity grid on frozen features
4. everything is fine-tuned together at a tenth of the rate

This script uses 400 phantoms at 64 px so it finishes in a few minutes; the
acceptance suite runs the same code on 2000.
"""
from pathlib import Path

from bsnet import synthcxr, training
from bsnet.training import TrainConfig

OUT = Path(__file__).parent / "out" / "checkpoints"
SIZE = 64

records = synthcxr.make_samples(500, seed=1, size=SIZE)
train = training.prepare(records[:400], SIZE)
val = training.prepare(records[400:], SIZE)


def cfg(stage, epochs, mode="ha"):
    return TrainConfig(stage=stage, epochs=epochs, input_size=SIZE, mode=mode)


seg = training.train_segmentation(train, val, cfg("segmentation", 4))
print("segmentation val dice", round(seg.history[-1]["val_dice"], 3))

ali = training.train_alignment(train, val, cfg("alignment", 3), seg.checkpoint)
print("alignment val IoU", round(ali.history[-1]["val_iou"], 3))

# stage 3 history starts with an epoch -1 entry: the untrained head
sco = training.train_scoring(train, val, cfg("scoring", 3), ali.checkpoint)
print("scoring val MAE by epoch", [round(h["val_mae"], 3) for h in sco.history])

full = training.finetune_all(train, val, cfg("finetune", 1), sco.checkpoint)
print("fine-tuned val MAE", round(training.scoring_mae(training.build_model(full.checkpoint), val, "ha"), 3))

# checkpoints are a JSON manifest plus one raw float32 blob
training.save_checkpoint(full.checkpoint, OUT / "finetune_ha_best")
print("saved", OUT / "finetune_ha_best")
