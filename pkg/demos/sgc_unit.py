"""Walk through one SGC unit: edge features, grouped layers, shuffle, neighbor max-pool."""
import numpy as np

from shufflepoint import tensor as T
from shufflepoint.geometry import build_edge_features, knn_search, normalize_unit_sphere
from shufflepoint.sgc import GroupConvLayer, SgcUnitConfig, SGCUnit, channel_shuffle

rng = np.random.default_rng(0)
xyz = normalize_unit_sphere(rng.normal(size=(64, 3)))

# each point sees its 8 nearest neighbors; edge feature = (center, center - neighbor)
nbrs = knn_search(xyz, 8)
edges = build_edge_features(xyz, nbrs, "a")
print("edge features", edges.shape)

# a grouped 1x1 conv is a dense conv with block-diagonal weights
layer = GroupConvLayer(8, 8, 4, rng, with_bn=False, with_activation=False)
print("block-diagonal weight mask:")
print((layer.block_diagonal() != 0).astype(int))

# shuffle interleaves the groups so the next layer mixes them
print("shuffle of 0..5 with g=2:", channel_shuffle(T.Tensor(np.arange(6.0)), 2).data)

unit = SGCUnit(SgcUnitConfig(g=2, mlp_widths=(32, 32, 64)), edges.shape[-1], rng)
feats = unit(edges)
print("unit output", feats.shape, "weights", sum(l.weight_count for l in unit.layers))
