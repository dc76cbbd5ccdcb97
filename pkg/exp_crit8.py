"""Exploratory run of the criterion-8 pipeline (not part of the package)."""
import sys, time
import numpy as np
import vico.numerics as N
from vico import diffusion as D, synthetic, trainer as TR
from vico.model import ModelConfig, VicoModel
from vico.evalkit import mask_iou

t0 = time.time()
out = sys.argv[1] if len(sys.argv) > 1 else "/tmp/exp8"
pre_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 1200
fit_steps = int(sys.argv[3]) if len(sys.argv) > 3 else 400

synthetic.generate_dataset(out + "/data", n_images=5, image_size=32, seed=77)
dataset = TR.DatasetSpec.from_manifest(out + "/data/manifest.json")
sched = D.build_schedule(1000)

model = VicoModel(ModelConfig(model_seed=1))
pcurve = TR.pretrain_backbone(model, TR.PretrainConfig(steps=pre_steps, batch_size=8, seed=2), sched)
print(f"warmup: first10 {np.mean([v for _,v in pcurve[:10]]):.4f} last10 {np.mean([v for _,v in pcurve[-10:]]):.4f}  ({time.time()-t0:.0f}s)", flush=True)

state = TR.fit(dataset, TR.TrainConfig(steps=fit_steps, seed=3), model, sched)
den = [row[2] for row in state.curve]
first10, last10 = np.mean(den[:10]), np.mean(den[-10:])
print(f"personalize: first10 {first10:.4f} last10 {last10:.4f} ratio {last10/first10:.3f}  ({time.time()-t0:.0f}s)", flush=True)

latents = state.latents
truths = dataset.load_masks()
prompt = dataset.prompt_templates[0]
for blk in (4, 6):
    ious = [mask_iou(TR.reference_mask(model, latents[k], prompt, blk, sched), truths[k]) for k in range(5)]
    print(f"block {blk} IoUs: {[f'{v:.2f}' for v in ious]} mean {np.mean(ious):.3f}", flush=True)
print(f"total {time.time()-t0:.0f}s")
