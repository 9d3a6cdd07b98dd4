"""Lift a noisy per-view segmenter into 3D and compare it with the 2D outputs.

Uses the desk model for the full pipeline. The first run trains it, which
takes about an hour of CPU time; later runs load it from artifacts/ (or from
$LIFT3D_ARTIFACTS).

    python3 demos/03_lift_labels.py
"""

import time

from lift3d.desk import desk_render_config, ensure_model, heldout_scenes
from lift3d.evaluate import evaluate_scene

store, summary = ensure_model("full")
print(f"model: {summary['steps_done']} steps, {summary['cpu_seconds'] / 60:.1f} CPU minutes of training")

data = heldout_scenes(operators=("labelpaint",))[0]
t0 = time.process_time()
row = evaluate_scene(data, store, "labelpaint", "full", n_sources=8, targets=range(0, 16, 3),
                     config=desk_render_config("full"))
print(f"rendered {len(range(0, 16, 3))} views in {time.process_time() - t0:.0f} CPU s")

print(f"RGB PSNR of the re-rendered views: {row['psnr']:.2f} dB")
print(f"label IoU  lifted {row['iou_3d']:.3f}  per-view 2D {row['iou_2d']:.3f}")
for k in ("short", "long"):
    a, b = row[f"warped_rmse_3d_{k}"], row[f"warped_rmse_2d_{k}"]
    print(f"{k:>5s}-range disagreement  lifted {a:.4f}  2D {b:.4f}  ({1 - a / b:.0%} lower)")
