#!/usr/bin/env python3
"""Populate the local weight store with torchvision's ImageNet checkpoints.

The library itself never touches the network; run this once per machine:

    python scripts/fetch_weights.py --dest weights

and point ``weights_dir`` (or CTKIDNEY_WEIGHTS) at the same directory.
"""

import argparse
import sys

from torchvision import models as tvm

from ctkidney.models import FAMILIES, register_weights

SOURCES = {
    "mobilenet_v2": tvm.MobileNet_V2_Weights.IMAGENET1K_V2,
    "efficientnet_v2": tvm.EfficientNet_V2_S_Weights.IMAGENET1K_V1,
    "inception_v2": tvm.Inception_V3_Weights.IMAGENET1K_V1,
    "vit_b16": tvm.ViT_B_16_Weights.IMAGENET1K_V1,
}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dest", default="weights", help="weight store directory")
    p.add_argument("--family", action="append", choices=FAMILIES, help="fetch only these (repeatable)")
    args = p.parse_args(argv)
    for family in args.family or FAMILIES:
        weights = SOURCES[family]
        print(f"{family}: {weights}", flush=True)
        path = register_weights(args.dest, family, weights.get_state_dict(progress=True))
        print(f"  -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
