"""How the merge threshold trades duplicates against lost instances.

The fixture places five robots in a row plus rotated ghost hypotheses on
each, so loose merging fuses neighbours and strict merging keeps ghosts.
"""
from mireg.geom import bbox_diagonal, cloud_resolution, voxel_downsample
from mireg.metrics import aggregate, get_profile, match_instances
from mireg.pose import FilterConfig, filter_and_optimize
from mireg.scenegen import make_robot_model, robot_row_fixture

model = make_robot_model(0.05)
scene, ann, cands = robot_row_fixture(model)
nodes = voxel_downsample(model, 0.05).points

print("theta  predicted   MR    MP")
for theta in (0.9, 0.8, 0.7, 0.6, 0.5, 0.4):
    cfg = FilterConfig(theta=theta, r_norm=bbox_diagonal(model), d_op=1.5 * cloud_resolution(scene),
                       strategy="point-to-point")
    res = filter_and_optimize(cands, model.points, scene.points, cfg, add_points=nodes, overlap_target=scene)
    rep = aggregate([match_instances(res.transforms, ann.instance_transforms, get_profile("welding"))])
    print(f" {theta:.1f}   {len(res.instances):6d}    {rep.mr:.2f}  {rep.mp:.2f}")
