"""
A synthetic operating room
==========================

Real cataract videos are not needed to exercise the pipeline. A Markov chain
walks through the 14 phases, each phase lights up a few characteristic
instruments, and a little bit-flip noise keeps the task honest.
"""

import tempfile
from pathlib import Path

import numpy as np

from cataphase import dataio, simgen
from cataphase.dataio import PHASE_NAMES, TOOL_NAMES

###############################################################################
# The default workflow
# --------------------

model = simgen.default_model(noise=0.05)
for p in (0, 5, 7):
    tools = [TOOL_NAMES[t] for t in np.flatnonzero(model.emission[p] > 0.5)]
    print(f"{PHASE_NAMES[p]:>28s}: {', '.join(tools)}")
print("phase 3 continues to", np.flatnonzero(model.transition[3]), "with", model.transition[3][[4, 5]])

###############################################################################
# Generating videos
# -----------------
#
# Frames are sampled at 3 fps. Every video draws from its own seeded stream,
# so video ``k`` is the same whether 5 or 500 videos are generated.

videos = simgen.generate(model, 5, duration_range_s=(120, 240), seed=0)
for v in videos:
    skipped = sorted(set(range(14)) - set(v.annotation.phases))
    print(f"{v.meta.video_id}: {v.meta.duration_s:6.1f} s, {len(v.records)} frames, skipped phases {skipped}")

###############################################################################
# How hard is it?
# ---------------
#
# Knowing the true emission table, the best frame-by-frame guess (uniform
# prior, no temporal context) sets the reference point for trained models.

print(f"frame-wise MAP accuracy: {simgen.bayes_accuracy(model, videos):.3f}")
clean = simgen.default_model(noise=0.0)
print(f"without bit flips:       {simgen.bayes_accuracy(clean, simgen.generate(clean, 5, seed=0)):.3f}")

###############################################################################
# On disk
# -------
#
# A dataset is four files: frame table, feature store, annotations and the
# split manifest.

with tempfile.TemporaryDirectory() as tmp:
    dataset = simgen.to_dataset(videos, seed=0)
    dataio.save_dataset(dataset, tmp)
    for f in sorted(Path(tmp).iterdir()):
        print(f"{f.name:16s} {f.stat().st_size:8d} bytes")
    print("round-trip equal:", dataio.load_dataset(tmp).records == dataset.records)
