# Walk through the 3D U-Net: channel plan, parameter counts, receptive field.
import numpy as np

from unet3d import Tensor, UNetConfig, build, count_params, forward
from unet3d.unet import receptive_field_radius

# the full-size network: four resolution levels, 32 base channels, 8 classes
full = UNetConfig(levels=4, base_channels=32, num_classes=8)
params = build(full, seed=0)
print("trainable scalars incl. BN:", count_params(params))

no_bn = build(UNetConfig(levels=4, base_channels=32, num_classes=8, use_batchnorm=False), seed=0)
print("conv weights and biases only:", count_params(no_bn))

# every conv kernel, with (c_out, c_in) per layer
for name in params.trainable_names():
    if name.endswith(".w"):
        print(f"{name:16s} {params[name].shape}")

# how far along z an input voxel can reach; this sets the tile overlap needed
for k in (1, 2, 3, 4):
    print("levels", k, "radius", receptive_field_radius(UNetConfig(levels=k)))

# a small net runs a forward pass in well under a second
tiny = build(UNetConfig(levels=2, base_channels=8, num_classes=8), seed=0)
x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 1, 32, 32, 32)).astype(np.float32))
logits = forward(tiny, x)
logits.shape          # (1, 8, 32, 32, 32): one logit per class per voxel
