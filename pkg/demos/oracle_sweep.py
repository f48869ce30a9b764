"""How candidate quality bounds any selector: oracle cIoU against p_miss."""
from maskgroups.experiments import toy_gen_config, toy_scene_config
from maskgroups.metrics import oracle_sweep
from maskgroups.synth import sample_scenes

scenes = [s.annotation for s in sample_scenes(100, seed=1, config=toy_scene_config())]
rows = oracle_sweep(scenes, toy_gen_config(1), p_miss_grid=(0.0, 0.1, 0.25, 0.5, 0.75, 1.0), distractor_grid=(0, 4))
print("distractors  p_miss  oracle_cIoU")
for r in rows:
    print(f"{r['distractors']:>11}  {r['p_miss']:>6.2f}  {r['oracle_ciou']:.4f}")
