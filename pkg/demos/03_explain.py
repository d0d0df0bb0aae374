"""
Occlusion maps
==============

Zero one superpixel at a time and watch the six region distributions move.
Run ``02_staged_training.py`` first; it leaves a checkpoint in ``out/``.
"""
from pathlib import Path

import numpy as np

from bsnet import explain, imaging, synthcxr, training

OUT = Path(__file__).parent / "out"
model = training.build_model(training.load_checkpoint(OUT / "checkpoints" / "finetune_ha_best"))
size = model.config.input_size

# a phantom with one heavy region (E: middle band, right half) and nothing else
sev = np.zeros((3, 2), int)
sev[1, 1] = 3
rec = synthcxr.gen_phantom(synthcxr.PhantomSpec(seed=123, severity=sev, size=size))
img = imaging.normalize_cxr(rec.image)

expl = explain.explanation_map(model, img, n_superpixels=explain.default_superpixels(size))
print("predicted grid\n", expl.prediction)
print("max supportiveness per region\n", explain.region_supportiveness(expl).round(3))

overlay = explain.render_explanation(expl, expl.prediction, OUT / "explanation.png")
gray = np.repeat((img * 255).astype(np.uint8)[..., None], 3, axis=2)
imaging.write_png(OUT / "explanation_side_by_side.png", np.concatenate([gray, overlay], axis=1))
explain.write_deltas_csv(OUT / "explanation_deltas.csv", expl)

# the per-pixel map is exactly one delta per superpixel
assert np.array_equal(expl.emap, expl.deltas[expl.labels])
print("forward passes:", expl.labels.max() + 2)
