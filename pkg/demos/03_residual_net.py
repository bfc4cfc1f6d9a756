"""
A small bottleneck ResNet trained with Adam
===========================================

Build the desk-sized network, check its gradients against finite
differences, then train it for a handful of epochs on synthetic cells.
"""
import tempfile

import numpy as np

from cytoclass.dataset import (AugmentConfig, PreprocessConfig, channel_stats, generate_fixture_dataset,
                               load_planes, normalize, stratified_split)
from cytoclass.resnet import NetConfig, build_network, layer_count, parameter_count, softmax_xent, train

# the 50-layer topology is one config away
big = NetConfig(input_side=224, in_channels=3, stem_channels=64, stem_kernel=7, stem_stride=2,
                stage_blocks=(3, 4, 6, 3), stage_channels=(256, 512, 1024, 2048), n_classes=5)
print("50-layer variant:", layer_count(big), "layers,", parameter_count(big), "parameters")
print("desk variant:", layer_count(NetConfig()), "layers,", parameter_count(NetConfig()), "parameters")

# central differences on a tiny double-precision net
tiny = build_network(NetConfig(input_side=8, stem_channels=8, stage_blocks=(1,), stage_channels=(16,),
                               dtype="float64"), seed=0)
tiny.params["s0.b0.bn3.gamma"][:] = 0.7
x, y = np.random.default_rng(0).normal(size=(4, 8, 8)), np.array([0, 1, 2, 3])
logits, cache = tiny.forward(x, train=True)
g = tiny.backward(cache, softmax_xent(logits, y)[1])["s0.b0.conv2"].reshape(-1)
w = tiny.params["s0.b0.conv2"].reshape(-1)
for j in (0, 17, 100):
    w[j] += 1e-5
    lp = softmax_xent(tiny.forward(x, train=True)[0], y)[0]
    w[j] -= 2e-5
    lm = softmax_xent(tiny.forward(x, train=True)[0], y)[0]
    w[j] += 1e-5
    print(f"conv2[{j}]: analytic {g[j]: .6e}  numeric {(lp - lm) / 2e-5: .6e}")

# train on synthetic cells with flips and rotations
root = tempfile.mkdtemp(prefix="cytoclass-demo-")
split = stratified_split(generate_fixture_dataset(root, 30, seed=3), seed=42)
planes = load_planes(split, PreprocessConfig())
tr, va, te = (split.indices(s) for s in ("train", "val", "test"))
net = build_network(NetConfig(), seed=42)
net.normalization = channel_stats(planes[tr])
res = train(net, planes[tr], split.labels[tr], planes[va], split.labels[va], AugmentConfig(),
            epochs=6, batch_size=32, seed=42, record_ids=tr,
            log=lambda m: print(f"epoch {m.epoch}: loss {m.train_loss:.3f}, val acc {m.val_accuracy:.2f}"))
acc = np.mean(net.predict(normalize(planes[te], net.normalization)) == split.labels[te])
print(f"kept epoch {res.best_epoch}; test accuracy {acc:.3f}")
