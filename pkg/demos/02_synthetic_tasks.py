"""What the synthetic multimodal tasks look like.

Every example is a latent scene (regions with shape / color / size), a
frozen-projection image view, and a token sequence that queries or
describes the scene.  Run:  python3 demos/02_synthetic_tasks.py
"""
import numpy as np

from ticketforge.data import (default_suite, gen_pretrain_corpus, gen_task)

for task in default_suite():
    ds = gen_task(task, seed=7, size=2000, split="train")
    freq = np.bincount(ds.labels, minlength=task.class_count) / ds.size
    print(f"{task.task_id:14} relation={task.relation:18} "
          f"classes={task.class_count}  label freq={np.round(freq, 3)}")

print()
ds = gen_task(default_suite()[0], seed=7, size=4, split="train")
print("color_query example:")
print("  tokens :", ds.txt_tokens[0])
print("  shapes :", ds.shapes[0], " colors:", ds.colors[0],
      " sizes:", ds.sizes[0])
print("  label  :", ds.labels[0], "(the queried object's color)")
print("  feature block shape:", ds.img_feats.shape)

corpus = gen_pretrain_corpus(seed=7, size=2000)
print()
print("pretext corpus:")
print("  matched pair rate :", corpus.itm_labels.mean())
print("  masked token rate :", (corpus.mlm_targets >= 0).mean())
print("  masked region rate:", corpus.mrm_mask.mean())
