"""Farthest point sampling and the two k-NN paths on one cloud."""
import time

import numpy as np

from shufflepoint.geometry import farthest_point_sample, knn_search

rng = np.random.default_rng(1)

line = np.zeros((8, 3))
line[:, 0] = np.arange(8)
print("FPS on 8 collinear points:", farthest_point_sample(line, 4))

pts = rng.uniform(-1, 1, size=(16000, 3))
found = {}
for method in ("brute", "kdtree"):
    t0 = time.perf_counter()
    found[method] = knn_search(pts, 20, method=method).indices
    print(f"{method:>6}: {time.perf_counter() - t0:.2f}s")
print("paths agree:", np.array_equal(found["brute"], found["kdtree"]))

picks = farthest_point_sample(pts, 512)
print("FPS kept", len(picks), "points; min spacing",
      f"{np.sqrt(((pts[picks, None] - pts[None, picks]) ** 2).sum(-1) + np.eye(512) * 9).min():.3f}")
