"""Full registration on a corrupted scene, next to sequential RANSAC."""
from mireg import PipelineConfig, register, run_baseline
from mireg.cli import make_scene
from mireg.metrics import aggregate, get_profile, match_instances

model, scene, ann = make_scene(5, seed=11, noise_fraction=0.005, outlier_fraction=0.2)
cfg = PipelineConfig(inlier_ratio=0.7)
profile = get_profile("welding")

for name, run in [("pipeline", register), ("RANSAC", run_baseline)]:
    out = run(model, scene, cfg, ann) if run is register else run(model, scene, ann, cfg)
    c = match_instances(out.result.transforms, ann.instance_transforms, profile)
    rep = aggregate([c])
    worst = max(c.re) if c.re else float("nan")
    print(f"{name:>8}: {c.m_suc}/{c.m_gt} found, {c.m_pred} predicted, "
          f"MF {rep.mf:.3f}, worst RE {worst:.2f} deg, {out.runtime_seconds:.2f}s")
