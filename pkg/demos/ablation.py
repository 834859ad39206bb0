"""Full step rewards vs. final-only rewards vs. single-step episodes.

Trains three policies on the same world and seeds and compares how fast
each reaches a 0.9 greedy pass rate. About two minutes on one core.
"""
# %%
import numpy as np

from stepgrain.env import WorldConfig, generate_world
from stepgrain.optim import TrainConfig, train
from stepgrain.reward import ABLATION_MODES

seed = 0
world = generate_world(WorldConfig(), seed)
curves = {}
for mode in ABLATION_MODES:
    cfg = TrainConfig.toy_preset(policy_seed=seed, rollout_seed=seed, ablation_mode=mode)
    _, _, metrics = train(world, cfg)
    curves[mode] = np.array([m["pass_rate"] for m in metrics])

# %%
for mode, c in curves.items():
    hit = np.flatnonzero(c >= 0.9)
    when = f"iteration {hit[0] + 1}" if hit.size else "never"
    print(f"{mode:20s} final {c[-1]:.3f}  first >= 0.9 at {when}")

# %% Optional plot, if matplotlib is around.
try:
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    for mode, c in curves.items():
        plt.plot(np.arange(1, len(c) + 1), c, label=mode)
    plt.xlabel("iteration")
    plt.ylabel("greedy pass rate")
    plt.legend()
    plt.savefig("ablation.png", dpi=120)
    print("saved ablation.png")
