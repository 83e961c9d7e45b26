"""Parameters and FLOPs of the default classifier as the group count grows."""
from shufflepoint.complexity import layer_flops, layer_params, sweep_groups
from shufflepoint.model import default_config

print("one layer, 64 -> 128 channels, 1024 points x 20 neighbors")
for g in (1, 2, 4, 8):
    print(f"  g={g}: params {layer_params(64, 128, g):>6}  flops {layer_flops(1024, 20, 64, 128, g):>11,}")

print("\nwhole classifier, 256 points")
print(f"{'g':>3} {'params':>9} {'flops':>13} {'grouped flops':>14}")
for g, r in sweep_groups(default_config(), [1, 2, 4, 8]):
    print(f"{g:>3} {r.params:>9} {r.flops:>13,} {r.grouped_flops:>14,}")
