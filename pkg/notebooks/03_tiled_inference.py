# Tiled inference along z: tile plan, blending weights, seams.
import numpy as np

from unet3d import Tensor, UNetConfig, build, forward
from unet3d.data import Volume, normalize_intensity
from unet3d.inference import plan_tiles, predict_volume
from unet3d.layers import softmax_forward
from unet3d.unet import receptive_field_radius

plan = plan_tiles(depth=96, tile_depth=40, overlap=8)
print("tile starts:", plan.starts)
w = plan.weights()
print("weights sum to one per slice:", np.allclose(w.sum(axis=0), 1))

config = UNetConfig(levels=2, base_channels=8, num_classes=8)
params = build(config, seed=0)
image = Volume(np.random.default_rng(0).integers(-150, 350, size=(96, 16, 16)).astype(np.int16))

tiled = predict_volume(params, image, tile_depth=40, overlap=8)
full = softmax_forward(forward(params, Tensor(normalize_intensity(image.voxels)[None, None])).data)

# the difference is confined to slices within the receptive field of a seam
diff = np.abs(tiled.data - full).max(axis=(0, 1, 3, 4))
r = receptive_field_radius(config)
print("radius", r)
for z in range(0, 96, 4):
    print(z, f"{diff[z]:.1e}")
