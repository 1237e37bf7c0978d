"""Panoptic quality on a hand-built scene.

One car of 5 points, ground of 5 points. The predicted car covers 3 of the
car points, so its IoU is 0.6 and it counts as a match. Then one more point
is dropped: IoU 0.4 is below the 0.5 gate and the match turns into one FP
plus one FN.

    python3 demos/metric_walkthrough.py
"""
import numpy as np

from dqseg.cloud import DEFAULT_TAXONOMY, LabeledPointCloud
from dqseg.metrics import evaluate

CAR, GROUND = 0, 3


def main():
    n = 10
    semantic = np.array([CAR] * 5 + [GROUND] * 5)
    instance = np.array([1] * 5 + [0] * 5)
    gt = LabeledPointCloud(np.zeros((n, 3), np.float32), np.zeros(n, np.float32), semantic, instance, 3, 3)

    pred_sem = np.array([CAR] * 3 + [GROUND] * 7)
    pred_inst = np.array([1] * 3 + [0] * 7)
    for label, drop in (("IoU 0.6", None), ("IoU 0.4", 2)):
        sem, inst = pred_sem.copy(), pred_inst.copy()
        if drop is not None:
            sem[drop], inst[drop] = GROUND, 0
        car = evaluate(sem, inst, gt, DEFAULT_TAXONOMY).stats[CAR]
        print(f"{label}: TP={car.tp} FP={car.fp} FN={car.fn} SQ={car.sq:.2f} RQ={car.rq:.2f} PQ={car.pq:.2f}")


if __name__ == "__main__":
    main()
