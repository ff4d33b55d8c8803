"""Record golden values for test_backbone.py.  Run once, inspect, commit the JSON."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from fglora import backbone as bb
from fglora.rng import SplitMix64

TINY = bb.UNetConfig(in_channels=1, base_channels=2, depth=2, patch_size=8)


def golden_inputs():
    store = bb.build_unet(bb.UNetConfig(), seed=0)
    store.update(bb.build_head("seg", bb.UNetConfig(), seed=1))
    x = SplitMix64(5).normal((2, 16, 16, 16))
    return store, x


def pretrain_tiny():
    store = bb.build_unet(TINY, seed=3)
    vols = [SplitMix64(100 + i).normal((1, 8, 8, 8)) for i in range(4)]
    history = bb.pretrain_backbone(store, vols, epochs=3, seed=3)
    return store, history


def record() -> dict:
    store, x = golden_inputs()
    seg = bb.forward_seg(store, x).data
    enc = bb.forward_encoder(store, x).data
    tiny, history = pretrain_tiny()
    return {
        "forward_seg_first8": seg.reshape(-1)[:8].tolist(),
        "forward_seg_sum": float(seg.sum()),
        "forward_encoder": enc.tolist(),
        "pretrain_history": history,
        "pretrain_param_sum": float(sum(t.data.sum() for _, t in tiny.items())),
    }


if __name__ == "__main__":
    path = Path(__file__).with_name("golden.json")
    path.write_text(json.dumps(record(), indent=2) + "\n")
    print(path.read_text())
