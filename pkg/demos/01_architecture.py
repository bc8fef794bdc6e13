"""Layer plans and parameter counts of the DVNet presets.

Run:  python demos/01_architecture.py
"""

from dvnet.arch import build_network, count_parameters, plan_architecture, preset

print("DVNet-v3 (3D) layer plan")
print(plan_architecture(preset("v3")).format())
print()

for name, rank in [("v3", 2), ("v1", 3), ("v2", 3), ("v3", 3)]:
    cfg = preset(name, spatial_rank=rank)
    n = count_parameters(build_network(cfg, seed=0))
    print(f"{rank}D-{name}: k={cfg.growth_rate} theta_down={cfg.theta_down} theta_up={cfg.theta_up} -> {n / 1e6:.2f}M parameters")
