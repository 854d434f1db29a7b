"""Floating-point reference: host pre-training and int8 weight export.

This is the only module that does float arithmetic on model parameters.
"""
import logging

import numpy as np
import torch
from torch import nn

from .dataio import Checkpoint
from .intops import INT8_MAX, INT8_MIN

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class FloatModel(nn.Module):
    """Bias-free float twin of a :class:`~priot.layers.ModelSpec`."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        mods = []
        for layer in spec.layers:
            if layer.kind == "conv2d":
                mods.append(nn.Conv2d(layer.in_channels, layer.out_channels, layer.kernel,
                                      stride=layer.stride, bias=False))
            elif layer.kind == "fc":
                mods.append(nn.Linear(layer.in_features, layer.out_features, bias=False))
            elif layer.kind == "relu":
                mods.append(nn.ReLU())
            elif layer.kind == "maxpool2d":
                mods.append(nn.MaxPool2d(layer.window))
            elif layer.kind == "flatten":
                mods.append(nn.Flatten())
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)

    def param_weights(self):
        return [m.weight.detach().cpu().numpy().astype(np.float64)
                for m in self.net if isinstance(m, (nn.Conv2d, nn.Linear))]


def float_input(images):
    """uint8 images (N, H, W) -> float tensor (N, 1, H, W) in [-1, 1)."""
    x = (np.asarray(images, dtype=np.float32) - 128.0) / 128.0
    return torch.from_numpy(x[:, None])


def float_predict(model, images, batch_size=512):
    model.eval()
    with torch.no_grad():
        out = [model(float_input(images[i:i + batch_size])).argmax(1).numpy()
               for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def float_accuracy(model, ds):
    return float((float_predict(model, ds.images) == ds.labels).mean())


def pretrain(spec, train, test=None, epochs=5, lr=0.01, momentum=0.9, batch_size=32, seed=0):
    """SGD-with-momentum cross-entropy training; returns ``(model, test_acc)``."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    model = FloatModel(spec)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    loss_fn = nn.CrossEntropyLoss()
    X = float_input(train.images)
    y = torch.from_numpy(train.labels)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(len(y), generator=gen)
        total = 0.0
        for i in range(0, len(y), batch_size):
            idx = order[i:i + batch_size]
            opt.zero_grad()
            loss = loss_fn(model(X[idx]), y[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {i // batch_size}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("pretrain epoch %d: loss %.4f", epoch, total / len(y))
    acc = float_accuracy(model, test) if test is not None else float("nan")
    return model, acc


def quantize_array(w):
    """Symmetric per-tensor int8 quantization: scale by 127 / max|w|."""
    w = np.asarray(w, dtype=np.float64)
    peak = np.abs(w).max() if w.size else 0.0
    if peak == 0.0:
        raise ValueError("cannot quantize an all-zero tensor")
    q = np.clip(np.rint(w * (INT8_MAX / peak)), INT8_MIN, INT8_MAX).astype(np.int8)
    return q, INT8_MAX / peak


def quantize_weights(model, metadata=None):
    """int8 checkpoint of a float model; scales are filled in by calibration."""
    weights = [quantize_array(w)[0] for w in model.param_weights()]
    return Checkpoint(model.spec, weights, scales=None, scores=None,
                      metadata=dict(metadata or {}, stage="quantized"))
