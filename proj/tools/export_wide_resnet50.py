#!/usr/bin/env python3
"""Export torchvision's ImageNet wide_resnet50_2 weights to a dmdd tensor archive.

    python tools/export_wide_resnet50.py weights/wide_resnet50_2.dmdd

Needs torch and torchvision. Only the stem and layer1..layer4 are written;
the classifier and batch-norm step counters are dropped.
"""

import argparse
import pathlib
import struct
import sys

MAGIC = b"DMDDTNS1"


def write_str(out, text):
    data = text.encode("utf-8")
    out.write(struct.pack("<I", len(data)))
    out.write(data)


def write_archive(path, meta, tensors):
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<I", len(meta)))
        for key in sorted(meta):
            write_str(out, key)
            write_str(out, meta[key])
        out.write(struct.pack("<I", len(tensors)))
        for name, array in tensors:
            write_str(out, name)
            out.write(struct.pack("<I", array.ndim))
            out.write(struct.pack("<%di" % array.ndim, *array.shape))
            out.write(array.astype("<f8", copy=False).tobytes(order="C"))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("output", type=pathlib.Path)
    args = parser.parse_args()

    try:
        import torchvision
    except ImportError:
        sys.exit("torchvision is required: pip install torch torchvision")

    weights = torchvision.models.Wide_ResNet50_2_Weights.IMAGENET1K_V1
    model = torchvision.models.wide_resnet50_2(weights=weights).eval()

    tensors = []
    for name, value in model.state_dict().items():
        if name.startswith("fc.") or name.endswith("num_batches_tracked"):
            continue
        tensors.append((name, value.detach().cpu().double().numpy()))

    args.output.parent.mkdir(parents=True, exist_ok=True)
    write_archive(args.output, {"source": "torchvision wide_resnet50_2 IMAGENET1K_V1"}, tensors)
    print("wrote %d tensors to %s" % (len(tensors), args.output))


if __name__ == "__main__":
    main()
