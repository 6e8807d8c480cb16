"""Train a small single-stream model for a few epochs, then look at which
segments of a test image it is unsure about and what the masked query
retrieves compared with the plain global descriptor."""

import numpy as np

from radepth.network import DualStreamNet, NetConfig, NetworkDepthModel
from radepth.retrieval import RetrievalConfig, build_index, retrieve_context
from radepth.structures import ContextSample
from radepth.synth import FIRST_RARE, generate_corpus
from radepth.training import TrainPlan, TrainSample, train_single_stream
from radepth.uncertainty import NoiseConfig, segment_desk

_, scenes = generate_corpus(1, 260, palette_kw={"contrast": 0.5, "num_rare": 8}, rare_probability=0.1)
train, test = scenes[:240], scenes[240:]

net = DualStreamNet(NetConfig(d_model=32, num_heads=2, num_blocks=3, taps=(1, 2), decoder_channels=16,
                              min_depth=1.0), seed=0)
samples = [TrainSample(s.image, s.depth, s.K, i, i) for i, s in enumerate(train)]
tlog = train_single_stream(net, samples, TrainPlan(epochs=8, lr={2: 2e-3}, noise_augment=0.05))
print("stage-2 loss: %.4f -> %.4f" % (tlog.epoch_losses[0], tlog.epoch_losses[-1]))

pool = {i: ContextSample(s.image, s.depth, i, "retrieved", i) for i, s in enumerate(train)}
index = build_index((i, i, s.image) for i, s in pool.items())
model = NetworkDepthModel(net)

# pick a test scene that shows a rare object
query = next(s for s in test if (s.class_map >= FIRST_RARE).any())
seg = segment_desk(query.image)
rare_px = query.class_map >= FIRST_RARE
cfg = RetrievalConfig(M=4, noise=NoiseConfig(0.1, 5))
masked = retrieve_context(query.image, model, seg, index, pool, cfg, np.random.default_rng(0), scene_id=-1)
U = masked.uncertainty.values
print("mean U on rare pixels %.3f, elsewhere %.3f" % (U[rare_px].mean(), U[~rare_px].mean()))
print("kept %d of %d segments" % (len(masked.kept), seg.num_segments))

cfg.use_uncertainty = False
plain = retrieve_context(query.image, model, seg, index, pool, cfg, np.random.default_rng(0), scene_id=-1)
wanted = set(np.unique(query.class_map[rare_px]))
for name, res in (("masked", masked), ("global", plain)):
    hits = [bool(wanted & set(np.unique(train[i].class_map))) for i in res.ids]
    print("%-7s ids %s  share the rare class: %s" % (name, res.ids, hits))
