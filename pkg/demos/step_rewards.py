"""How individual steps get scored.

Builds a few hand-written episodes on one task and prints the reward each
step receives under different weights on tool-call success.
"""
# %%
from stepgrain.env import WorldConfig, generate_world, rollout_actions
from stepgrain.reward import serialize_annotation_request, shape_rewards

world = generate_world(WorldConfig(), seed=0)
task = next(t for t in world.tasks if len(t.required_items) == 3)


def producer(item):
    """A (tool, arg) pair that yields ``item``."""
    for tool in world.tools:
        for arg, got in tool.yields.items():
            if got == item:
                return tool.name, arg
    raise LookupError(item)


def call(tool, arg):
    return ("CALL", tool, "ARG", arg, "END")


calls = [call(*producer(i)) for i in task.required_items]
answer = ("FINISH",) + tuple(world.vocab.answers[i] for i in task.required_items)
episodes = {
    "clean": calls + [answer],
    "repeat first call": [calls[0], calls[0]] + calls[1:] + [answer],
    "answer early": calls[:1] + [answer],
}

# %% Per-step rewards for alpha in {0, 1, 2}.
for name, actions in episodes.items():
    traj = rollout_actions(world, task.id, actions)
    print(f"\n{name}: {len(traj.steps)} steps")
    for alpha in (0, 1, 2):
        r = shape_rewards(world, traj, alpha)
        print(f"  alpha={alpha}: " + "  ".join(f"{x.normalized:.2f}" for x in r))

# %% The same judgement as a prompt for an external judge.
prompt, schema = serialize_annotation_request(rollout_actions(world, task.id, episodes["clean"]), world)
print("\n" + prompt)
print("response fields:", sorted(schema["properties"]))
