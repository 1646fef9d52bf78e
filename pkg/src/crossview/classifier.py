"""Small scene classifier over the synthetic scene classes, used to drive the metrics."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataman import SCENE_CLASSES, synth_scene, to_uint8

log = logging.getLogger(__name__)

INPUT_SIZE = 64


class SceneNet(nn.Module):
    def __init__(self, n_classes: int = len(SCENE_CLASSES), feat_dim: int = 32, width: int = 16):
        super().__init__()
        self.config = {"n_classes": n_classes, "feat_dim": feat_dim, "width": width}
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(4 * w, 4 * w, 3, 2, 1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
            nn.Linear(16 * w, feat_dim), nn.ReLU(),
        )
        self.head = nn.Linear(feat_dim, n_classes)

    def forward(self, x):
        f = self.features(x)
        return self.head(f), f


def _to_input(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images])
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 127.5 - 1.0
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)
    if t.shape[-1] != INPUT_SIZE:
        t = F.interpolate(t, size=(INPUT_SIZE, INPUT_SIZE), mode="bilinear", align_corners=False, antialias=True)
    return t


class SceneClassifier:
    """``probs``/``acts`` over 8-bit (or [-1, 1] float) ``H x W x 3`` images."""

    def __init__(self, net: SceneNet):
        self.net = net.eval()

    def _run(self, images):
        outs_p, outs_f = [], []
        with torch.no_grad():
            for i in range(0, len(images), 64):
                logits, feats = self.net(_to_input(images[i:i + 64]))
                outs_p.append(torch.softmax(logits.double(), dim=1).numpy())
                outs_f.append(feats.double().numpy())
        return np.concatenate(outs_p), np.concatenate(outs_f)

    def probs(self, images) -> np.ndarray:
        return self._run(images)[0]

    def acts(self, images) -> np.ndarray:
        return self._run(images)[1]

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.net.config, sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path):
        torch.save({"config": self.net.config, "fingerprint": self.fingerprint(),
                    "state": self.net.state_dict()}, Path(path))

    @classmethod
    def load(cls, path) -> "SceneClassifier":
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        net = SceneNet(**blob["config"])
        net.load_state_dict(blob["state"])
        clf = cls(net)
        if clf.fingerprint() != blob["fingerprint"]:
            raise ValueError(f"{path}: classifier fingerprint mismatch")
        return clf


def train_scene_classifier(n: int = 600, seed: int = 0, steps: int = 400, size: int = 64,
                           view: str = "ground") -> SceneClassifier:
    """Fit on freshly rendered synthetic scenes; labels are the scene classes."""
    torch.manual_seed(seed)
    samples = [synth_scene(10_000_000 + seed * 100_000 + i, size) for i in range(n)]
    x = _to_input([to_uint8(getattr(s, view)) for s in samples])
    y = torch.tensor([s.label for s in samples])
    net = SceneNet()
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    rng = np.random.default_rng(seed)
    net.train()
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(n, size=min(64, n), replace=False))
        logits, _ = net(x[idx])
        loss = F.cross_entropy(logits, y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        acc = (net(x)[0].argmax(1) == y).float().mean().item()
    log.info("scene classifier: train accuracy %.3f on %d scenes", acc, n)
    return SceneClassifier(net)
