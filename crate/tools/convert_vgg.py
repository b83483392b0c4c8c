#!/usr/bin/env python3
"""Convert torchvision VGG weights into a pyrstyle extractor archive.

The archive holds conv0 (identity 1x1 input conv) and conv<block>_<index>
weights up to conv5_1. ImageNet normalisation is applied by the Rust
extractor itself, so no statistics are folded into conv0.

    python tools/convert_vgg.py --variant vgg19 --out vgg19.safetensors
    python tools/convert_vgg.py --variant vgg19 --state-dict vgg19.pth --out vgg19.safetensors
"""

import argparse

import torch
import torchvision
from safetensors.torch import save_file

DEPTHS = {"vgg16": [2, 2, 3, 3, 1], "vgg19": [2, 2, 4, 4, 1]}


def build(variant, state_dict, random):
    ctor = getattr(torchvision.models, variant)
    if random:
        return ctor(weights=None)
    if state_dict:
        model = ctor(weights=None)
        model.load_state_dict(torch.load(state_dict, map_location="cpu"))
        return model
    return ctor(weights="DEFAULT")


def convert(model, variant):
    convs = [m for m in model.features if isinstance(m, torch.nn.Conv2d)]
    tensors = {
        "conv0.weight": torch.eye(3).reshape(3, 3, 1, 1),
        "conv0.bias": torch.zeros(3),
    }
    i = 0
    for block, depth in enumerate(DEPTHS[variant], start=1):
        for index in range(1, depth + 1):
            conv = convs[i]
            i += 1
            key = f"conv{block}_{index}"
            tensors[f"{key}.weight"] = conv.weight.detach().float().contiguous()
            tensors[f"{key}.bias"] = conv.bias.detach().float().contiguous()
    return tensors


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variant", choices=sorted(DEPTHS), default="vgg19")
    p.add_argument("--state-dict", help="local torchvision state dict (.pth); skips the download")
    p.add_argument("--random", action="store_true", help="random weights, for format checks only")
    p.add_argument("--out", required=True)
    args = p.parse_args()
    model = build(args.variant, args.state_dict, args.random)
    save_file(convert(model, args.variant), args.out,
              metadata={"format": "vgg-extractor", "variant": args.variant})


if __name__ == "__main__":
    main()
