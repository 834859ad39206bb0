"""Train a small tool-using policy and watch it learn.

Run from the repository root:  python demos/quickstart.py
"""
# %%
import numpy as np

from stepgrain.env import WorldConfig, generate_world
from stepgrain.evaluation import greedy_pass_rate, pass_rate
from stepgrain.optim import TrainConfig, train
from stepgrain.policy import init_policy

world = generate_world(WorldConfig(), seed=0)
print(f"{len(world.tools)} tools, {len(world.tasks)} tasks, horizon {world.horizon}")
task = world.tasks[0]
print("first query:", " ".join(task.query_tokens), "| needs items", task.required_items)

# %% Before training the policy mostly emits junk or answers blindly.
cfg = TrainConfig.toy_preset(iterations=150)
p0 = init_policy(world, cfg.hidden, cfg.policy_seed, cfg.prior_strength, cfg.init_scale)
print("greedy pass rate at init:", round(greedy_pass_rate(world, p0), 3))


# %% Train, printing every 25 iterations.
def show(it, params, vparams, row):
    if it % 25 == 0:
        print(f"iter {it:4d}  return {row['mean_return']:.3f}  pass {row['pass_rate']:.3f}  "
              f"tool success {row['tool_success_rate']:.3f}")


params, vparams, metrics = train(world, cfg, callback=show)

# %% Sampled vs search-based evaluation of the trained policy.
rng = np.random.default_rng(0)
seq = pass_rate(world, params, n_runs=3, rng=rng)
dfs = pass_rate(world, params, strategy="dfs", width=3, budget=24)
print(f"sampled: pass {seq.pass_rate:.3f} (sd over runs {seq.pass_rate_std:.3f}), tool success {seq.tool_success_rate:.3f}")
print(f"dfs:     pass {dfs.pass_rate:.3f}")

# %% One solved episode, action by action.
traj = dfs.trajectories[0]
for s in traj.steps:
    print(" ".join(s.action.tokens), "->", " ".join(s.observation.tokens))
