"""Exports reference weights, an input and the reference output for each
architecture so `cargo test -p enseg --test parity` can compare forward passes.

    python3 scripts/smp_parity.py OUT_DIR
    ENSEG_PARITY_DIR=OUT_DIR cargo test -p enseg --test parity
"""

import sys

import torch
from safetensors.torch import save_file
import segmentation_models_pytorch as smp

ARCHS = {
    "unet": smp.Unet,
    "unetpp": smp.UnetPlusPlus,
    "manet": smp.MAnet,
    "linknet": smp.Linknet,
    "fpn": smp.FPN,
    "pspnet": smp.PSPNet,
    "pan": smp.PAN,
}
CLASSES = 4
H, W = 128, 160


def main(out_dir, encoder="efficientnet-b0"):
    for name, cls in ARCHS.items():
        torch.manual_seed(0)
        model = cls(encoder, encoder_weights=None, classes=CLASSES, activation="softmax2d")
        # Non-trivial batch-norm statistics, otherwise eval mode is an identity.
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.2, 0.2)
                m.running_var.uniform_(0.5, 1.5)
                m.weight.data.uniform_(0.5, 1.5)
                m.bias.data.uniform_(-0.2, 0.2)
        model = model.double().eval()
        x = torch.randn(2, 3, H, W, dtype=torch.float64)
        with torch.no_grad():
            y = model(x)
        tensors = {
            k: v.contiguous()
            for k, v in model.state_dict().items()
            if not k.endswith("num_batches_tracked")
        }
        tensors["__input__"] = x
        tensors["__output__"] = y.contiguous()
        save_file(tensors, f"{out_dir}/{name}.safetensors")
        print(name, tuple(y.shape))


if __name__ == "__main__":
    main(*sys.argv[1:])
