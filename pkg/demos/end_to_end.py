"""Generate data, train every stage and render one clip, in a scratch directory.

The default settings take a few minutes on one core. ``--quick`` shrinks
everything so the run finishes in seconds (the renders will be poor).

Run: python3 demos/end_to_end.py [--quick] [--workdir DIR]
"""

import argparse
import tempfile
from pathlib import Path

from talkinghead import pipeline

QUICK = ["run.n_clips=8", "run.frames_per_clip=20", "run.nerf_frames=2", "run.classifier_steps=50",
         "sync.steps=50", "a2m.steps=50", "ldm.steps=200", "nerf.resolution=16", "nerf.steps=60",
         "nerf.n_samples=32", "nerf.n_samples_infer=32"]

ap = argparse.ArgumentParser()
ap.add_argument("--quick", action="store_true")
ap.add_argument("--workdir")
args = ap.parse_args()
root = Path(args.workdir or tempfile.mkdtemp(prefix="talkinghead-"))
sets = [f"paths.dataset={root / 'data'}", f"paths.checkpoints={root / 'checkpoints'}",
        f"paths.output={root / 'outputs'}"] + (QUICK if args.quick else [])
cfg = pipeline.load_config(None, sets)

names = pipeline.run_gen_data(cfg)
print(f"dataset: {len(names)} clips in {cfg.dataset_dir}")
pipeline.run_train_all(cfg)
print("NeRF training-frame PSNR:", (cfg.checkpoint_dir / "curves" / "nerf_psnr.txt").read_text().split())

# Drive the renderer with clip 0's audio and score against its ground truth, with and without the LDM.
_, clips = pipeline.load_dataset(cfg)
for no_ldm in (False, True):
    res = pipeline.run_infer(cfg, cfg.dataset_dir / f"{names[0]}.aud", clips[0].emotion,
                             cfg.output_dir / ("no_ldm" if no_ldm else "full"), no_ldm=no_ldm,
                             reference=names[0])
    r = res.report
    print(f"{'no LDM' if no_ldm else 'full':>7}: ssim {r.ssim:.3f} psnr {r.psnr:.2f} "
          f"m_lmd {r.m_lmd:.4f} f_lmd {r.f_lmd:.4f} -> {res.out_dir}")
