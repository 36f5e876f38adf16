# Train the tiny network on synthetic phantoms and watch the Dice curve.
import tempfile
from pathlib import Path

import numpy as np

from unet3d import UNetConfig
from unet3d.augment import AugmentConfig
from unet3d.data import PatchSource, gen_phantom
from unet3d.evaluation import score_cases
from unet3d.optim import TrainPlan, train

# a phantom: background at -100 HU, organ k at 40*k HU, plus noise
image, labels = gen_phantom(seed=0, extent=64, num_classes=8)
print("voxels per class:", np.bincount(labels.voxels.ravel(), minlength=8))

train_set = [gen_phantom(s, 64, 8) for s in range(8)]
test_set = [gen_phantom(s, 64, 8) for s in range(8, 10)]

# batches of three augmented patches; batch i depends only on (seed, i)
augment = AugmentConfig(enabled=True)
source = PatchSource([i for i, _ in train_set], [lab for _, lab in train_set], 48, batch_size=3,
                     seed=0, augment=augment)
x, y = source.batch(0)
x.shape, y.shape

# a short run; the acceptance suite trains for 500 iterations
config = UNetConfig(levels=2, base_channels=8, num_classes=8)
plan = TrainPlan(iterations=20, batch_size=3, patch=48, seed=0, augment=augment)
out = Path(tempfile.mkdtemp())
result = train(config, source, plan, out)
print(result.log_path.read_text())

loss, dice = score_cases(result.params, test_set)
print(f"test loss {loss:.3f}  mean foreground Dice {dice:.3f}")
