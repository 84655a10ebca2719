"""Score hand-built predictions with minADE, miss rate and mAP.

Run: python demos/02_metrics_by_hand.py
"""
# %%
import numpy as np

from limtr.metrics import EvalCase, classify_behavior, compute_map, evaluate_cases, is_miss, min_ade, speed_scale

# %% A car driving straight at 8 m/s; ground truth sampled at 2 Hz for 8 s.
t = np.arange(1, 17) * 0.5
gt = np.stack([8.0 * t, np.zeros_like(t)], axis=1)
vel = np.tile([8.0, 0.0], (16, 1))
valid = np.ones(16, bool)
print("bucket:", classify_behavior(gt, vel))

# %% Six modes: one drifts sideways by 1 m, the rest fan out.
offsets = [1.0, 4.0, -4.0, 8.0, -8.0, 12.0]
preds = np.stack([gt + [0.0, o] for o in offsets])
for horizon in (3, 5, 8):
    print(f"{horizon}s  minADE {min_ade(preds, gt, valid, horizon):.2f} m  "
          f"miss {is_miss(preds, gt, vel, valid, horizon, 8.0)}")
print("threshold scale at 8 m/s: %.3f" % speed_scale(8.0))

# %% Confidence ordering decides mAP: the good mode ranked first versus last.
ranked_first = EvalCase(np.array([0.5, 0.1, 0.1, 0.1, 0.1, 0.1]), preds, gt, vel, valid, 8.0, "straight")
ranked_last = EvalCase(np.array([0.05, 0.3, 0.25, 0.2, 0.12, 0.08]), preds, gt, vel, valid, 8.0, "straight")
print("mAP, correct mode most confident:", compute_map([ranked_first], 8))
print("mAP, correct mode least confident: %.3f" % compute_map([ranked_last], 8))

# %% Full report over a few classes.
cases = []
for cls, case in zip(("vehicle", "pedestrian", "cyclist"), (ranked_first, ranked_last, ranked_first)):
    cases.append(EvalCase(case.probs, case.preds, gt, vel, valid, 8.0, "straight", cls=cls))
print(evaluate_cases(cases).table())
