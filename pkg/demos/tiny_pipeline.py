"""
From synthetic canopies to a saliency map
=========================================

A scaled-down version of the whole workflow: render images, pretrain
without labels, fine-tune on four fold groups, score the held-out one and
look at where the last block's tokens differ most.
"""

import numpy as np

from csvt.data import SynthSpec, split, synth_generate
from csvt.metrics import attention_saliency, confusion, metrics
from csvt.model import CsvtConfig, CsvtModel
from csvt.ssl import SslConfig, pretrain, ssl_checkpoint_tensors
from csvt.train import FinetuneConfig, finetune, predict

# 20 images per nitrogen class, 32x32 pixels, five folds
images, records = synth_generate(SynthSpec(image_size=32, samples_per_class=20, seed=1))
labels = np.array([r.label_index for r in records])
print(images.shape, "images; class means of the green channel:",
      [round(float(images[labels == c][..., 1].mean()), 3) for c in range(4)])

cfg = CsvtConfig(image_size=32, patch_size=8, embed_dim=32, num_layers=2, num_heads=2)

# self-distillation on the unlabeled images
ssl = SslConfig(epochs=3, batch_size=16, warmup_epochs=1, global_size=32, local_size=16,
                local_views=2, head_hidden=64, head_bottleneck=32, head_out=64)
state = pretrain(images, cfg, ssl)
print("ssl loss per step:", [round(r[5], 3) for r in state.log])

# classifier initialised from the teacher backbone
model = CsvtModel(cfg, seed=0)
model.load_state_dict(ssl_checkpoint_tensors(state), strict=False, skip_prefixes=("ssl.", "head."))
train, test = split(records, 0)
train_mask = np.array([r.fold != 0 for r in records])
finetune(model, images[train_mask], labels[train_mask],
         FinetuneConfig(epochs=40, warmup_epochs=4, batch_size=16))

pred = predict(model, images[~train_mask])
m = metrics(confusion(labels[~train_mask], pred))
print(f"held-out accuracy {m.accuracy:.3f} on {len(test)} images")
print("per-class F1:", np.round(m.f1, 3))

# saliency grid for one image, one value per 8x8 patch
grid = attention_saliency(model, images[0], upsample=False)
print(np.round(grid, 2))
