# ---
# jupytext:
#   text_representation:
#     format_name: percent
# ---

# %% [markdown]
# # A two-round task with an articulated part
#
# Opening a drawer needs no special treatment: the drawer is simply the
# "object" that moves relative to the cabinet frame. The scripted episode has
# two rounds, open the drawer and then put a block inside, so four stages.

# %%
from pcrpolicy import DemoStore, RegistrationParams, infer_sequence
from pcrpolicy.synth import make_drawer_episode, pose_error

ep = make_drawer_episode(seed=0)
ds = DemoStore()
for dm in ep.demos:
    ds.add_demo(dm)
print(ds.keys())

# %%
res = infer_sequence(ds, ep.stages, ep.observations, RegistrationParams(rng_seed=0), fitness_threshold=0.5)
print("completed:", res.completed)
for (key, role), step, truth in zip(ep.stages, res.steps, ep.truth):
    r, t = pose_error(step.action, truth)
    print(f"{key:20s} {role:5s} rot {r:.1e} rad  trans {t:.1e} m  avg fitness {step.evidence.average_fitness:.2f}")
