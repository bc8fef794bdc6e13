"""Train a small DVNet on synthetic phantoms and score it on unseen ones.

The network is a three-level version of DVNet so that training fits in a
few minutes on one CPU core. Pass the iteration count as the first
argument (default 150; the acceptance suite uses 600).

Run:  python demos/02_train_segmenter.py [iterations]
"""

import sys

from dvnet.arch import NetworkConfig, count_parameters
from dvnet.checkpoint import save_checkpoint
from dvnet.phantom import PhantomParams, gen_phantom
from dvnet.training import Sample, train, validate

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 150

params = PhantomParams(shape=(32, 32, 32), n_cells=4, cell_radius=(3, 5), vessel_segments=3, vessel_radius=(1.5, 2.5), segment_length=(8, 16))
train_set = [Sample(p.volume, p.labels) for p in (gen_phantom(params, 100 + i) for i in range(20))]
test_set = [Sample(p.volume, p.labels) for p in (gen_phantom(params, 200 + i) for i in range(6))]

config = NetworkConfig(levels=(2, 2, 2), lu_layers=4, growth_rate=8, theta_down=0.5, theta_up=0.5, input_features=16, dropout_rate=0.1)
result = train(config, train_set, iterations, loss_kind="xent", batch_size=2, seed=0, log_every=50)
print(f"{count_parameters(result.network)} parameters, {result.elapsed:.0f} s of training")

m = validate(result.network, test_set, 3)
print("held-out IoU per class (tissue, cell, vessel):", ", ".join(f"{v:.3f}" for v in m.per_class_iou))
print(f"mean IoU {m.mean_iou:.3f}, accuracy {m.accuracy:.4f}")

save_checkpoint(result.network, "demo_segmenter.ckpt")
print("checkpoint written to demo_segmenter.ckpt")
