"""
Training the tool-presence head
===============================

The image backbone is out of scope here. What remains is its output layer: a
dense map from a feature vector to 21 sigmoid scores, trained with momentum
SGD at learning rate 1e-4, batch 8, from N(0, 0.01) weights.
"""

import numpy as np

from cataphase import pipeline, simgen
from cataphase.dataio import TOOL_NAMES
from cataphase.pipeline import RunConfig

###############################################################################
# Features
# --------
#
# Each synthetic feature vector is the sum of one unit direction per visible
# tool plus a small phase offset and noise. ``feature_scale`` sets the overall
# magnitude. Pooled CNN features have norms in the tens, and at unit scale the
# small learning rate barely moves the weights in 10,000 steps.

workflow = simgen.default_model(feature_scale=30.0)
dataset = simgen.to_dataset(simgen.generate(workflow, 10, seed=1))
train, holdout = dataset.split_records("train"), dataset.split_records("holdout_test")
print(f"{len(train)} training frames, {len(holdout)} holdout frames, D = {workflow.feature_dim}")

###############################################################################
# Training
# --------

config = RunConfig(task="tools", input_dim=workflow.feature_dim, seed=0)
untrained = pipeline.new_tool_head(workflow.feature_dim, config)
head, log, _ = pipeline.train_tool_head(train, config)
losses = log.losses()
print("loss at iterations 1, 1000, 10000:", [round(losses[k], 4) for k in (0, 999, 9999)])

###############################################################################
# Evaluation
# ----------

before = pipeline.evaluate_tools(untrained, holdout)
after = pipeline.evaluate_tools(head, holdout)
print(f"mean AUC  {before.mean_auc:.3f} -> {after.mean_auc:.4f}")
print(f"hAcc      {before.hamming_accuracy:.3f} -> {after.hamming_accuracy:.4f}")
print(f"sAcc      {before.subset_accuracy:.3f} -> {after.subset_accuracy:.4f}")
worst = int(np.nanargmin([a if a is not None else np.nan for a in after.auc_per_class]))
print(f"weakest detector: {TOOL_NAMES[worst]} (AUC {after.auc_per_class[worst]:.4f})")
