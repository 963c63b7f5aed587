"""Regression constants, each first computed by an enumeration oracle in ``oracles.py``."""

# default U-Net-32: 5 encoder blocks, input (1, 64, 64, 64)
UNET32_COMPUTE = 952053760
UNET32_PARAMS = 1395744
UNET32_ACTIVATIONS = 75681792
UNET32_CROSSINGS = 106
UNET32_PASSTHROUGH_OVERHEAD = 55017472

UNET64_PARAMS = 5582912
UNET128_PARAMS = 22331520
