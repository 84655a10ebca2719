"""Does the LiDAR branch help? A small version of the cue experiment.

With a truthful cue the LiDAR model should beat the history-only baseline;
with cue strength 0 the two should tie. The full-size run lives in
tests/test_acceptance.py; this one uses 300 scenarios and one seed, which
is enough for the cue to lift mAP but too little for a clear minADE gap.

Run: python demos/03_cue_experiment.py
"""
# %%
from limtr.experiment import lidar_gain

for cue in (1.0, 0.0):
    res = lidar_gain(300, cue, seeds=(0,), log=print)
    lid, base = res.lidar.summary(), res.baseline.summary()
    print(f"cue {cue}: LiDAR minADE {lid['minADE']:.3f} mAP {lid['mAP']:.3f} | "
          f"baseline minADE {base['minADE']:.3f} mAP {base['mAP']:.3f} | "
          f"{100 * res.minade_reduction:+.1f}% minADE change, {res.seconds:.0f}s")
