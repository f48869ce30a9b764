"""Sample one scene, save it as a PNG and list the prompts generated for it."""
import sys
from pathlib import Path

from PIL import Image

from maskgroups.datagen import build_dataset
from maskgroups.experiments import toy_gen_config, toy_scene_config
from maskgroups.synth import render_annotation, sample_scenes

out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out")
out_dir.mkdir(exist_ok=True)

scene = sample_scenes(1, seed=5, config=toy_scene_config())[0].annotation
Image.fromarray(render_annotation(scene)).save(out_dir / f"{scene.scene_id}.png")
for e in scene.entities:
    print(f"entity {e.entity_id}: {e.category}, {', '.join(e.attributes)}, bbox {e.bbox}")

samples = build_dataset([scene], toy_gen_config(5))
print(f"\n{len(samples)} samples, {len(samples[0].candidates)} candidates each")
for s in samples[:15]:
    refs = f" refs={s.ref_indices}" if s.ref_indices else ""
    print(f"[{s.provenance:12s}] {s.prompt}{refs} -> {sorted(s.targets)}")
