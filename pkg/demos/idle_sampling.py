"""Idle-state pose sampling on a moving synthetic head trace.

Run: python3 demos/idle_sampling.py
"""

import numpy as np

from talkinghead.data import AudioFeatureSequence, generate_pose_trace
from talkinghead.idlepose import SamplerConfig, find_idle_bounds, generate_segments, idle_pipeline
from talkinghead.metrics import motion_stats

frames = 60
source = generate_pose_trace(np.random.default_rng(3), frames)

# The source holds its pose for a few stretches; those runs set the segment length range.
bounds = find_idle_bounds(source)
print(f"idle run lengths in the source: {bounds.len_min}..{bounds.len_max}, "
      f"first idle pose at frame {bounds.identified_idle_pose_indices[0]}")

cfg = SamplerConfig(len_gap=4, seed=11)
segments = generate_segments(frames, bounds.len_min, bounds.len_max, cfg.len_gap, cfg.seed)
print("segments:", [(s.start, s.end) for s in segments])

# Silent audio triggers the idle path; frames inside each segment repeat the previous pose.
silent = AudioFeatureSequence(np.zeros((frames, 16)), np.zeros(frames))
idle = idle_pipeline(source, silent, cfg)
timeline = np.full(frames, ".")
for s in segments:
    timeline[s.start:s.end + 1] = "#"
print("timeline:", "".join(timeline), "(# = held pose)")

for name, poses in (("source", source), ("idle", idle)):
    m = motion_stats(poses)
    print(f"{name:>6}: vel_avg {m.vel_avg:.5f}  acc_avg {m.acc_avg:.5f}")
print("Velocity drops because held frames do not move. Acceleration can rise:")
print("entering and leaving a held stretch changes velocity abruptly.")
