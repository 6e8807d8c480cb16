"""Render a synthetic desk scene from a nearby pose and compare the
analytic correspondences with what the image matcher finds."""

import numpy as np

from radepth.correspondence import match_desk
from radepth.geometry import PoseBounds, make_context_3d, sample_pose
from radepth.synth import generate_corpus

palette, scenes = generate_corpus(0, 1, palette_kw={"num_rare": 4}, rare_probability=0.5)
scene = scenes[0]
print("image", scene.image.shape, "depth range %.2f-%.2f m" % (scene.depth.values.min(), scene.depth.values.max()))
print("rare objects injected:", scene.injected)

# a small camera move, scaled to the scene's median depth
rng = np.random.default_rng(0)
pose = sample_pose(rng, PoseBounds.for_depth(scene.depth, 8, 0.05))
ctx, analytic = make_context_3d(scene.image, scene.depth, scene.K, pose)
print("visible context pixels:", int(ctx.depth.valid.sum()), "analytic correspondences:", len(analytic))

# where does the matcher agree with geometry?
found = match_desk(scene.image, ctx.image)
truth = {(int(u), int(v)): (u2, v2) for u, v, u2, v2, _ in analytic.pairs}
err = []
for u, v, u2, v2, _ in found.pairs:
    t = truth.get((int(u), int(v)))
    if t is not None:
        err.append(np.hypot(u2 - t[0], v2 - t[1]))
err = np.array(err)
print("matcher: %d matches, %d with ground truth" % (len(found), len(err)))
if len(err):
    print("  within 2 px: %.0f%%   median error %.2f px" % (100 * (err <= 2).mean(), np.median(err)))
