"""
Road-aligned image tiles
========================

Each road gets a 120 x 120 tile centred on its midpoint and rotated so the
road runs up the tile. The colour histogram of that tile is a compact
appearance feature.
"""

import numpy as np

from roadgnn.features import histogram_features
from roadgnn.raster import Raster, extract_tile, pixel_to_world

# a grey "asphalt" stripe running diagonally across a green field
size = 400
rows, cols = np.mgrid[0:size, 0:size]
on_road = np.abs(rows - cols) < 12
px = np.where(on_road[..., None], [110, 110, 110], [40, 140, 50]).astype(np.uint8)
raster = Raster(px, (0.5, 0.0, 0.0, -0.5, 500000.0, 3400000.0))

###############################################################################
# The stripe runs towards the north-west, i.e. heading 315 degrees. Aligning
# the tile with that heading makes the road vertical.

center = pixel_to_world(raster, 200, 200)
for heading in (0.0, 315.0):
    tile = extract_tile(raster, center, heading)
    grey_cols = (tile.pixels[:, :, 1] == 110).mean(axis=0)
    print(f"heading {heading:5.1f}: columns that are mostly road = {(grey_cols > 0.9).sum()}")

###############################################################################
# 32 bins per channel, 96 values in total.

hist = histogram_features(extract_tile(raster, center, 315.0)).reshape(3, 32)
for name, h in zip("RGB", hist):
    top = np.argsort(h)[::-1][:2]
    print(name, "dominant bins:", top.tolist(), "mass:", np.round(h[top], 3).tolist())

far = extract_tile(raster, pixel_to_world(raster, -500, -500), 0.0)
print("tile off the map, out-of-bounds fraction:", far.out_of_bounds_fraction)
